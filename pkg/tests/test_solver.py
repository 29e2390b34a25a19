import numpy as np
import pytest

from aoisched import (
    ChannelModel,
    CostModel,
    DeterministicPolicy,
    NotUnichainError,
    ProblemInstance,
    extract_greedy_policy,
    policy_evaluation,
    relative_value_iteration,
    state_action_costs,
    structure_aware_policy_iteration,
)
from aoisched.model import IDLE, SAMPLE_UPDATE

from bruteforce import oracle_theta


def test_rvi_matches_enumeration_on_tiny(tiny_instance):
    inst = tiny_instance
    for lam in (0.0, 0.1, 1.0, 10.0):
        vt = relative_value_iteration(inst, lam)
        ref = oracle_theta(
            inst.cap_l, inst.cap_r, inst.channel.gains, inst.channel.pmf,
            inst.costs.c_s, inst.costs.c_u, lam,
        )
        assert vt.theta == pytest.approx(ref, abs=1e-6)


def test_lambda_zero_theta_is_min_average_age(tiny_instance):
    inst = tiny_instance
    vt = relative_value_iteration(inst, 0.0)
    ref = oracle_theta(
        inst.cap_l, inst.cap_r, inst.channel.gains, inst.channel.pmf,
        inst.costs.c_s, inst.costs.c_u, 0.0,
    )
    assert vt.theta == pytest.approx(ref, abs=1e-6)
    assert vt.theta == pytest.approx(2.0, abs=1e-6)  # caps >= 2: age 2 is reachable


def test_zero_cost_degenerate_theta():
    # single gain, zero costs, caps 2: every policy yields average age 2
    ch = ChannelModel((1.0,), (1.0,))
    inst = ProblemInstance(2, 2, ch, CostModel(0.0, (0.0,), 0.0))
    vt = relative_value_iteration(inst, 1.0)
    assert vt.theta == pytest.approx(2.0, abs=1e-6)


def test_bellman_residual_bound(iv_a_instance):
    for lam in (0.1, 1.0):
        vt = relative_value_iteration(iv_a_instance, lam, tol=1e-9)
        j = state_action_costs(iv_a_instance, vt).j
        residual = np.abs(vt.theta + vt.values - j.min(axis=-1)).max()
        assert residual <= 5e-9


def test_policy_evaluation_always_idle(iv_a_instance):
    shape = (10, 10, iv_a_instance.channel.n)
    idle = DeterministicPolicy(np.zeros(shape, dtype=np.uint8))
    theta, vt = policy_evaluation(iv_a_instance, idle, 0.0)
    assert theta == pytest.approx(10.0, abs=1e-9)  # absorbs at the age cap


def test_policy_evaluation_always_act(iv_a_instance):
    shape = (10, 10, iv_a_instance.channel.n)
    act = DeterministicPolicy(np.full(shape, SAMPLE_UPDATE, dtype=np.uint8))
    theta, vt = policy_evaluation(iv_a_instance, act, 0.0)
    assert theta == pytest.approx(2.0, abs=1e-9)  # forced two-cycle of the ages


def test_policy_evaluation_not_unichain():
    # two closed classes: self-loop at (1,2) via sample+update, absorbing corner
    ch = ChannelModel((1.0,), (1.0,))
    inst = ProblemInstance(2, 2, ch, CostModel(0.0, (0.0,), 1.0))
    acts = np.zeros((2, 2, 1), dtype=np.uint8)
    acts[0, 1, 0] = SAMPLE_UPDATE  # (1,2) -> (1,2)
    pol = DeterministicPolicy(acts)
    with pytest.raises(NotUnichainError):
        policy_evaluation(inst, pol, 0.0)


def test_cross_solver_agreement(iv_a_instance, fig2_instance):
    for inst in (iv_a_instance, fig2_instance):
        for lam in (0.01, 0.1, 1.0):
            vt = relative_value_iteration(inst, lam)
            policy, theta = structure_aware_policy_iteration(inst, lam)
            assert theta == pytest.approx(vt.theta, abs=1e-6)
            # evaluating the solved policy reproduces theta exactly
            theta2, _ = policy_evaluation(inst, policy, lam)
            assert theta2 == pytest.approx(theta, abs=1e-9)


def test_policy_iteration_matches_enumeration(tiny_instance):
    inst = tiny_instance
    for lam in (0.0, 0.5, 3.0):
        _, theta = structure_aware_policy_iteration(inst, lam)
        ref = oracle_theta(
            inst.cap_l, inst.cap_r, inst.channel.gains, inst.channel.pmf,
            inst.costs.c_s, inst.costs.c_u, lam,
        )
        assert theta == pytest.approx(ref, abs=1e-6)


def test_zero_cost_policy_acts_everywhere_reachable(zero_cost_instance):
    policy, theta = structure_aware_policy_iteration(zero_cost_instance, 4.0)
    assert theta == pytest.approx(2.0, abs=1e-9)
    # sampling+updating must be co-optimal on the reachable region a_r >= a_l
    # (updating at a_r < a_l would push the destination age up, not down)
    vt = relative_value_iteration(zero_cost_instance, 4.0)
    j = state_action_costs(zero_cost_instance, vt).j
    cap = zero_cost_instance.cap_l
    reachable = np.arange(1, cap + 1)[None, :, None] >= np.arange(1, cap + 1)[:, None, None]
    gap = j[..., SAMPLE_UPDATE] - j.min(axis=-1)
    assert np.all(gap[np.broadcast_to(reachable, gap.shape)] <= 1e-8)


def test_greedy_extraction_ties_and_agreement(iv_a_instance):
    lam = 0.1
    vt = relative_value_iteration(iv_a_instance, lam)
    greedy = extract_greedy_policy(iv_a_instance, vt)
    policy, _ = structure_aware_policy_iteration(iv_a_instance, lam)
    j = state_action_costs(iv_a_instance, vt).j
    j_sorted = np.sort(j, axis=-1)
    clear = (j_sorted[..., 1] - j_sorted[..., 0]) > 1e-9
    assert np.array_equal(greedy.actions[clear], policy.actions[clear])


def test_greedy_idles_at_fresh_state(tiny_instance):
    # with a multiplier that prices any action above its one-step lookahead
    # gain, the fresh state (1,1) idles
    vt = relative_value_iteration(tiny_instance, 10.0)
    greedy = extract_greedy_policy(tiny_instance, vt)
    assert np.all(greedy.actions[0, 0, :] == IDLE)
    j = state_action_costs(tiny_instance, vt).j
    assert np.all(j[0, 0, :, IDLE] < np.delete(j[0, 0, :, :], IDLE, axis=-1).min(axis=-1))


def test_rvi_rejects_bad_arguments(iv_a_instance):
    with pytest.raises(Exception):
        relative_value_iteration(iv_a_instance, -1.0)
    with pytest.raises(Exception):
        relative_value_iteration(iv_a_instance, 1.0, tol=0.0)


def test_value_table_csv_roundtrip(tmp_path, tiny_instance):
    vt = relative_value_iteration(tiny_instance, 0.5)
    path = tmp_path / "values.csv"
    vt.to_csv(path, provenance="test")
    lines = path.read_text().splitlines()
    assert lines[0] == "# test"
    assert lines[1] == "a_l,a_r,h_index,value"
    assert len(lines) == 2 + tiny_instance.n_states
