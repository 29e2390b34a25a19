import numpy as np
import pytest

from aoisched import (
    AoiState,
    ChannelModel,
    CostModel,
    ProblemInstance,
    ValueTable,
    certify_dominance_monotonicity,
    certify_threshold_structure,
    certify_value_monotonicity,
    compute_thresholds,
    dominance_delta,
    relative_value_iteration,
    structure_aware_policy_iteration,
    threshold_monotonicity_sweep,
)
from aoisched.model import ACTIONS, IDLE, SAMPLE, SAMPLE_UPDATE, UPDATE
from aoisched.solver import DeterministicPolicy
from aoisched.structure import channel_upset_report


def test_dominance_delta_identity_and_antisymmetry(tiny_instance):
    vt = relative_value_iteration(tiny_instance, 0.5)
    st = AoiState(2, 2)
    for w in ACTIONS:
        assert dominance_delta(vt, st, 0, w, w, tiny_instance) == 0.0
    for w in ACTIONS:
        for wp in ACTIONS:
            d1 = dominance_delta(vt, st, 1, w, wp, tiny_instance)
            d2 = dominance_delta(vt, st, 1, wp, w, tiny_instance)
            assert d1 == pytest.approx(-d2, abs=1e-12)


def test_acting_dominates_at_stale_state(zero_cost_instance):
    vt = relative_value_iteration(zero_cost_instance, 1.0)
    st = AoiState(1, 3)  # stale destination, fresh sample available
    d = dominance_delta(vt, st, 0, (1, 1), (0, 0), zero_cost_instance)
    assert d < 0


def test_zero_cost_update_threshold_is_one(zero_cost_instance):
    vt = relative_value_iteration(zero_cost_instance, 1.0)
    rep = compute_thresholds(zero_cost_instance, vt)
    # updating dominates from the smallest destination age on for a_l = 1
    assert np.all(rep.psi_minus[SAMPLE_UPDATE][0, :] == 1.0)


def test_empty_dominance_set_sentinels():
    # enormous updating cost with a large multiplier: update actions never dominate
    ch = ChannelModel((1.0,), (1.0,))
    inst = ProblemInstance(4, 4, ch, CostModel(0.1, (1e6,), 1.0))
    vt = relative_value_iteration(inst, 10.0)
    rep = compute_thresholds(inst, vt)
    assert np.all(np.isinf(rep.phi_minus[UPDATE]))
    assert np.all(rep.phi_minus[UPDATE] > 0)
    assert np.all(rep.phi_plus[UPDATE] == -np.inf)


def test_value_monotonicity_on_solved_instances(iv_a_instance, fig2_instance):
    for inst in (iv_a_instance, fig2_instance):
        for lam in (0.01, 0.1, 1.0):
            vt = relative_value_iteration(inst, lam)
            rep = certify_value_monotonicity(vt)
            assert rep.passed, rep.violations[:3]


def test_value_monotonicity_negative_control():
    values = np.zeros((3, 3, 1))
    values[2, 0, 0] = -1.0  # decreasing in a_l
    rep = certify_value_monotonicity(ValueTable(values, 0.0, 0.0))
    assert not rep.passed
    assert rep.max_violation == pytest.approx(1.0)
    rep2 = certify_value_monotonicity(ValueTable(np.zeros((3, 3, 1)), 0.0, 0.0))
    assert rep2.passed


def test_dominance_monotonicity_certification(iv_a_instance):
    for lam in (0.01, 0.1, 1.0):
        vt = relative_value_iteration(iv_a_instance, lam)
        rep = certify_dominance_monotonicity(iv_a_instance, vt)
        assert rep.passed, rep.violations[:3]


def test_threshold_structure_certified(iv_a_instance, fig2_instance):
    for inst in (iv_a_instance, fig2_instance):
        for lam in (0.1, 1.0):
            vt = relative_value_iteration(inst, lam)
            policy, _ = structure_aware_policy_iteration(inst, lam)
            cert = certify_threshold_structure(inst, policy, vt)
            assert cert.all_ok, cert.violations[:5]


def test_threshold_structure_zero_cost(zero_cost_instance):
    vt = relative_value_iteration(zero_cost_instance, 1.0)
    policy, _ = structure_aware_policy_iteration(zero_cost_instance, 1.0)
    cert = certify_threshold_structure(zero_cost_instance, policy, vt)
    assert cert.all_ok


def test_threshold_structure_negative_control(iv_a_instance):
    lam = 0.1
    vt = relative_value_iteration(iv_a_instance, lam)
    policy, _ = structure_aware_policy_iteration(iv_a_instance, lam)
    # corrupt the policy in a region the thresholds constrain
    acts = policy.actions.copy()
    rep = compute_thresholds(iv_a_instance, vt)
    target = np.argwhere(
        np.arange(1, 11)[None, :, None] >= rep.psi_minus[SAMPLE_UPDATE][:, None, :]
    )
    assert target.size
    al, ar, h = target[0]
    acts[al, ar, h] = IDLE
    cert = certify_threshold_structure(iv_a_instance, DeterministicPolicy(acts), vt)
    assert not cert.all_ok


def test_sampling_cost_sweep_monotone(iv_a_instance):
    h = iv_a_instance.channel.index_of(0.0418)
    rep = threshold_monotonicity_sweep(
        iv_a_instance, [0.05, 0.2, 0.8, 3.2, 12.8], "sampling", h, 0.1
    )
    assert rep.monotone, rep.violations
    assert rep.parameter == "sampling"


def test_updating_cost_sweep_monotone(iv_a_instance):
    h = iv_a_instance.channel.index_of(0.1157)
    rep = threshold_monotonicity_sweep(
        iv_a_instance, [0.05, 0.2, 0.8, 3.2, 12.8], "updating", h, 0.1
    )
    assert rep.monotone, rep.violations


def test_single_point_sweep_trivially_monotone(tiny_instance):
    rep = threshold_monotonicity_sweep(tiny_instance, [0.3], "sampling", 0, 0.1)
    assert rep.monotone


def test_two_point_sampling_sweep(tiny_instance):
    rep = threshold_monotonicity_sweep(tiny_instance, [0.0, 25.0], "sampling", 0, 1.0)
    assert rep.monotone
    assert np.all(rep.thresholds[1] >= rep.thresholds[0])


def test_channel_upset_on_solved_policy(iv_a_instance):
    for lam in (0.1, 1.0):
        policy, _ = structure_aware_policy_iteration(iv_a_instance, lam)
        ok, viols = channel_upset_report(iv_a_instance, policy)
        assert ok, viols[:5]


def test_channel_upset_negative_control(iv_a_instance):
    acts = np.zeros((10, 10, 8), dtype=np.uint8)
    acts[5, 5, 2] = UPDATE  # update on a middling gain but idle on better ones
    ok, viols = channel_upset_report(iv_a_instance, DeterministicPolicy(acts))
    assert not ok
    assert viols[0][:2] == (6, 6)


def test_sweep_csv(tmp_path, tiny_instance):
    rep = threshold_monotonicity_sweep(tiny_instance, [0.1, 1.0], "sampling", 0, 0.5)
    path = tmp_path / "sweep.csv"
    rep.to_csv(path, provenance="p")
    lines = path.read_text().splitlines()
    assert lines[0] == "# p"
    assert lines[1] == "sampling,age,threshold"
    assert len(lines) == 2 + 2 * tiny_instance.cap_r
