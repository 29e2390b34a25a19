import numpy as np
import pytest
from hypothesis import given, strategies as st

from aoisched import (
    ACTIONS,
    AoiState,
    ChannelModel,
    CostModel,
    ProblemInstance,
    ValidationError,
    energy_cost,
    lagrange_cost,
    step_destination_age,
    step_device_age,
    transition,
)
from aoisched.model import destination_age_vector, energy_table, next_pair_table, pair_index


def test_device_age_examples():
    assert step_device_age(3, 1, 10) == 1
    assert step_device_age(3, 0, 10) == 4
    assert step_device_age(10, 0, 10) == 10


def test_destination_age_examples():
    assert step_destination_age(3, 7, 1, 10) == 4
    assert step_destination_age(3, 7, 0, 10) == 8
    assert step_destination_age(9, 10, 1, 10) == 10


def test_device_age_out_of_range():
    with pytest.raises(ValidationError):
        step_device_age(0, 0, 10)
    with pytest.raises(ValidationError):
        step_device_age(11, 0, 10)


def test_energy_cost_examples():
    costs = CostModel(0.2, (0.2 / 0.0418,), 1.0)
    assert energy_cost((0, 0), 0, costs) == 0.0
    assert energy_cost((1, 1), 0, costs) == pytest.approx(0.2 + 0.2 / 0.0418, abs=1e-12)
    costs2 = CostModel(2.0, (3.5,), 1.0)
    assert energy_cost((1, 0), 0, costs2) == 2.0


def test_energy_cost_unknown_gain():
    ch = ChannelModel((0.5, 1.0), (0.5, 0.5))
    with pytest.raises(ValidationError):
        ch.index_of(0.75)
    assert ch.index_of(1.0) == 1


def test_lagrange_cost_examples():
    costs = CostModel(0.2, (0.2 / 0.0418,), 1.0)
    assert lagrange_cost(AoiState(1, 5), 0, (0, 0), 0.0, costs) == 5.0
    expected = 5 + 0.1 * (0.2 + 0.2 / 0.0418)
    assert lagrange_cost(AoiState(1, 5), 0, (1, 1), 0.1, costs) == pytest.approx(expected)
    assert lagrange_cost(AoiState(1, 1), 0, (0, 0), 1.0, costs) == 1.0
    with pytest.raises(ValidationError):
        lagrange_cost(AoiState(1, 1), 0, (0, 0), -0.5, costs)


def test_transition_examples():
    ch = ChannelModel((1.0,), (1.0,))
    inst = ProblemInstance(10, 10, ch, CostModel(0.0, (0.0,), 1.0))
    assert transition(AoiState(3, 7), (1, 1), inst) == AoiState(1, 4)
    assert transition(AoiState(3, 7), (0, 0), inst) == AoiState(4, 8)
    assert transition(AoiState(10, 10), (0, 0), inst) == AoiState(10, 10)


def test_channel_validation():
    with pytest.raises(ValidationError):
        ChannelModel((1.0, 0.5), (0.5, 0.5))  # not increasing
    with pytest.raises(ValidationError):
        ChannelModel((-1.0, 0.5), (0.5, 0.5))
    with pytest.raises(ValidationError):
        ChannelModel((0.5, 1.0), (0.6, 0.6))  # sums to 1.2


def test_cost_validation():
    with pytest.raises(ValidationError):
        CostModel(0.1, (0.5, 1.0), 0.3)  # increasing in gain
    with pytest.raises(ValidationError):
        CostModel(-0.1, (0.5,), 0.3)


ages = st.integers(min_value=1, max_value=12)
flags = st.integers(min_value=0, max_value=1)


@given(a_l=ages, a_r=ages, s=flags, u=flags, cap=st.integers(min_value=2, max_value=12))
def test_ages_stay_in_range(a_l, a_r, s, u, cap):
    a_l = min(a_l, cap)
    a_r = min(a_r, cap)
    nl = step_device_age(a_l, s, cap)
    nr = step_destination_age(a_l, a_r, u, cap)
    assert 1 <= nl <= cap
    assert 1 <= nr <= cap


@given(a=ages, b=ages, cap=st.integers(min_value=2, max_value=12))
def test_device_age_monotone_without_sampling(a, b, cap):
    a, b = min(a, cap), min(b, cap)
    lo, hi = min(a, b), max(a, b)
    assert step_device_age(lo, 0, cap) <= step_device_age(hi, 0, cap)
    assert step_device_age(lo, 1, cap) == step_device_age(hi, 1, cap) == 1


@given(a_l=ages, a_r1=ages, a_r2=ages, cap=st.integers(min_value=2, max_value=12))
def test_destination_age_update_ignores_a_r(a_l, a_r1, a_r2, cap):
    a_l, a_r1, a_r2 = min(a_l, cap), min(a_r1, cap), min(a_r2, cap)
    assert step_destination_age(a_l, a_r1, 1, cap) == step_destination_age(a_l, a_r2, 1, cap)


@given(s=flags, u=flags, h=st.integers(min_value=0, max_value=2))
def test_energy_additivity(s, u, h):
    costs = CostModel(0.7, (2.0, 1.0, 0.5), 0.3)
    total = energy_cost((s, u), h, costs)
    assert total == pytest.approx(
        energy_cost((s, 0), h, costs) + energy_cost((0, u), h, costs)
    )


def test_energy_non_increasing_in_gain():
    costs = CostModel(0.7, (2.0, 1.0, 0.5), 0.3)
    vals = [energy_cost((1, 1), h, costs) for h in range(3)]
    assert vals == sorted(vals, reverse=True)


def test_dynamics_tables_match_scalar_ops():
    ch = ChannelModel((0.3, 0.9), (0.25, 0.75))
    inst = ProblemInstance(3, 4, ch, CostModel(0.5, (1.0, 0.2), 0.3))
    ns = next_pair_table(inst)
    en = energy_table(inst)
    ar = destination_age_vector(inst)
    for al in range(1, 4):
        for arr in range(1, 5):
            p = pair_index(al, arr, 4)
            assert ar[p] == arr
            for w, action in enumerate(ACTIONS):
                nxt = transition(AoiState(al, arr), action, inst)
                assert ns[w, p] == pair_index(nxt.a_l, nxt.a_r, 4)
    for h in range(2):
        for w, action in enumerate(ACTIONS):
            assert en[w, h] == pytest.approx(energy_cost(action, h, inst.costs))


def test_instance_validation():
    ch = ChannelModel((1.0,), (1.0,))
    with pytest.raises(ValidationError):
        ProblemInstance(0, 5, ch, CostModel(0.0, (0.0,), 1.0))
    with pytest.raises(ValidationError):
        ProblemInstance(5, 5, ch, CostModel(0.0, (0.0, 0.0), 1.0))  # c_u length
    inst = ProblemInstance(2, 2, ch, CostModel(0.0, (0.0,), 1.0))
    with pytest.raises(ValidationError):
        inst.validate_state(AoiState(3, 1))
