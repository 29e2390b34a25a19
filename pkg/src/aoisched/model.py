"""Domain model for slotted status sampling/updating with two-sided AoI counters.

A single device tracks the age of its freshest local sample (``a_l``) and the
age of the freshest packet held by the destination (``a_r``). Both ages are
1-based and saturate at finite counter caps. Each slot the device picks a
sampling flag ``s`` and an updating flag ``u``; sampling resets ``a_l`` to 1,
updating pulls ``a_r`` down to ``a_l + 1``, and both cost energy (the update
cost depends on the current channel gain).

Public ages are 1-based; dense tables everywhere in this package use 0-based
array indices ``[a_l - 1, a_r - 1, h_index]``. The offset is applied exactly
once, in :func:`pair_index` and the table builders below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ACTIONS",
    "IDLE",
    "UPDATE",
    "SAMPLE",
    "SAMPLE_UPDATE",
    "ValidationError",
    "AoiState",
    "ChannelModel",
    "CostModel",
    "ProblemInstance",
    "step_device_age",
    "step_destination_age",
    "energy_cost",
    "lagrange_cost",
    "transition",
    "pair_index",
    "next_pair_table",
    "energy_table",
    "destination_age_vector",
]

# Fixed action order (s, u). The order is load-bearing: every argmin in the
# package breaks exact ties toward the earliest entry, so idling wins ties.
ACTIONS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))

IDLE, UPDATE, SAMPLE, SAMPLE_UPDATE = range(4)


class ValidationError(ValueError):
    """An instance, state, or argument violates its contract."""


@dataclass(frozen=True)
class AoiState:
    """Pair of device-side and destination-side ages, both 1-based."""

    a_l: int
    a_r: int


@dataclass(frozen=True)
class ChannelModel:
    """Finite channel-gain alphabet with its probability mass function.

    Gains must be strictly increasing and positive. Equality of gains is by
    alphabet index everywhere in the package; :meth:`index_of` resolves a gain
    value to its index by exact equality, which is safe for values that
    round-tripped through the same decimal literal.
    """

    gains: tuple[float, ...]
    pmf: tuple[float, ...]

    def __post_init__(self):
        gains = tuple(float(g) for g in self.gains)
        pmf = tuple(float(p) for p in self.pmf)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "pmf", pmf)
        if len(gains) == 0:
            raise ValidationError("channel alphabet is empty")
        if len(gains) != len(pmf):
            raise ValidationError("gains and pmf lengths differ")
        if any(g <= 0 for g in gains):
            raise ValidationError("channel gains must be positive")
        if any(b <= a for a, b in zip(gains, gains[1:])):
            raise ValidationError("channel gains must be strictly increasing")
        if any(p < 0 for p in pmf):
            raise ValidationError("pmf entries must be non-negative")
        if abs(sum(pmf) - 1.0) > 1e-12:
            raise ValidationError(f"pmf sums to {sum(pmf)!r}, not 1")

    @property
    def n(self) -> int:
        return len(self.gains)

    def index_of(self, gain: float) -> int:
        try:
            return self.gains.index(gain)
        except ValueError:
            raise ValidationError(f"gain {gain!r} is not in the channel alphabet") from None

    def mean_gain(self) -> float:
        return float(np.dot(self.gains, self.pmf))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.pmf)


@dataclass(frozen=True)
class CostModel:
    """Sampling cost, per-gain updating costs, and the average energy budget.

    ``c_u`` is aligned with the channel alphabet by index and must be
    non-increasing in the gain (cheaper to transmit on better channels).
    """

    c_s: float
    c_u: tuple[float, ...]
    c_max: float

    def __post_init__(self):
        object.__setattr__(self, "c_s", float(self.c_s))
        object.__setattr__(self, "c_u", tuple(float(c) for c in self.c_u))
        object.__setattr__(self, "c_max", float(self.c_max))
        if self.c_s < 0:
            raise ValidationError("sampling cost must be >= 0")
        if any(c < 0 for c in self.c_u):
            raise ValidationError("updating costs must be >= 0")
        if any(b > a + 1e-12 for a, b in zip(self.c_u, self.c_u[1:])):
            raise ValidationError("updating cost must be non-increasing in the gain")
        if self.c_max < 0:
            raise ValidationError("energy budget must be >= 0")


@dataclass(frozen=True)
class ProblemInstance:
    """Counter caps, channel model, and cost model for one device."""

    cap_l: int
    cap_r: int
    channel: ChannelModel
    costs: CostModel

    def __post_init__(self):
        if int(self.cap_l) != self.cap_l or int(self.cap_r) != self.cap_r:
            raise ValidationError("caps must be integers")
        object.__setattr__(self, "cap_l", int(self.cap_l))
        object.__setattr__(self, "cap_r", int(self.cap_r))
        if self.cap_l < 1 or self.cap_r < 1:
            raise ValidationError("caps must be positive")
        if len(self.costs.c_u) != self.channel.n:
            raise ValidationError("updating cost table does not match the channel alphabet")

    @property
    def n_pairs(self) -> int:
        """Number of AoI pairs (a_l, a_r)."""
        return self.cap_l * self.cap_r

    @property
    def n_states(self) -> int:
        """Full state-space size including the channel component."""
        return self.cap_l * self.cap_r * self.channel.n

    def validate_state(self, state: AoiState) -> None:
        if not (1 <= state.a_l <= self.cap_l and 1 <= state.a_r <= self.cap_r):
            raise ValidationError(f"state {state} outside caps ({self.cap_l}, {self.cap_r})")


def step_device_age(a_l: int, s: int, cap_l: int) -> int:
    """One-step device-side age: reset to 1 on sampling, else saturating +1."""
    if not 1 <= a_l <= cap_l:
        raise ValidationError(f"device age {a_l} outside [1, {cap_l}]")
    if s:
        return 1
    return min(a_l + 1, cap_l)


def step_destination_age(a_l: int, a_r: int, u: int, cap_r: int) -> int:
    """One-step destination-side age: pulls to ``a_l + 1`` on updating, else +1."""
    if a_l < 1 or not 1 <= a_r <= cap_r:
        raise ValidationError(f"ages ({a_l}, {a_r}) invalid for cap {cap_r}")
    if u:
        return min(a_l + 1, cap_r)
    return min(a_r + 1, cap_r)


def energy_cost(action: tuple[int, int], h_index: int, costs: CostModel) -> float:
    """Energy spent by ``action = (s, u)`` when the channel is at ``h_index``."""
    s, u = action
    if not 0 <= h_index < len(costs.c_u):
        raise ValidationError(f"channel index {h_index} out of range")
    return s * costs.c_s + u * costs.c_u[h_index]


def lagrange_cost(
    state: AoiState, h_index: int, action: tuple[int, int], lam: float, costs: CostModel
) -> float:
    """Stage cost ``a_r + lam * energy`` folding the budget in with multiplier ``lam``."""
    if lam < 0:
        raise ValidationError("multiplier must be >= 0")
    return state.a_r + lam * energy_cost(action, h_index, costs)


def transition(state: AoiState, action: tuple[int, int], instance: ProblemInstance) -> AoiState:
    """Deterministic next AoI pair; the next channel draw is independent of it."""
    instance.validate_state(state)
    s, u = action
    return AoiState(
        step_device_age(state.a_l, s, instance.cap_l),
        step_destination_age(state.a_l, state.a_r, u, instance.cap_r),
    )


def pair_index(a_l: int, a_r: int, cap_r: int) -> int:
    """Flat 0-based index of the 1-based AoI pair (a_l, a_r)."""
    return (a_l - 1) * cap_r + (a_r - 1)


def next_pair_table(instance: ProblemInstance) -> np.ndarray:
    """Next flat pair index per action, shape ``(4, n_pairs)``.

    This is the shared one-step dynamics table used by every solver and the
    simulator; the AoI transition does not depend on the channel draw.
    """
    cap_l, cap_r = instance.cap_l, instance.cap_r
    a_l = np.arange(1, cap_l + 1)[:, None]
    a_r = np.arange(1, cap_r + 1)[None, :]
    out = np.empty((4, cap_l * cap_r), dtype=np.int64)
    for w, (s, u) in enumerate(ACTIONS):
        nl = np.where(s, 1, np.minimum(a_l + 1, cap_l))
        nr = np.where(u, np.minimum(a_l + 1, cap_r), np.minimum(a_r + 1, cap_r))
        nl, nr = np.broadcast_arrays(nl, nr)
        out[w] = ((nl - 1) * cap_r + (nr - 1)).ravel()
    return out


def energy_table(instance: ProblemInstance) -> np.ndarray:
    """Energy per (action, channel index), shape ``(4, |H|)``."""
    c_u = np.asarray(instance.costs.c_u)
    out = np.empty((4, instance.channel.n))
    for w, (s, u) in enumerate(ACTIONS):
        out[w] = s * instance.costs.c_s + u * c_u
    return out


def destination_age_vector(instance: ProblemInstance) -> np.ndarray:
    """Destination age per flat pair index, shape ``(n_pairs,)``."""
    a_r = np.arange(1, instance.cap_r + 1, dtype=float)
    return np.tile(a_r, instance.cap_l)
