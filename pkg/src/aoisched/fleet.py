"""Multi-device scheduling with collision-constrained updates.

At most one device may update per slot. The destination's grant decision
minimizes the sum of per-device Q-factors over the K+1 feasible joint update
vectors; each device then picks its own sampling action against its Q-factor
and the granted update flag. Per-device Q-factors come either from the
offline fixed point (:func:`per_device_fixed_point`) or from the online
asynchronous relative Q-learning step (:func:`q_learning_update`), run on two
timescales with the per-device multiplier update (:func:`lambda_update`).

The per-device stage cost folds the budget in: a_r + lam * (energy - budget).
A constant in the stage cost shifts Q-factors but never a grant or sampling
comparison.

:func:`centralized_oracle` solves the exact joint fixed point on tiny fleets
for gap measurement against the per-device sum approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import stationary_distribution
from .model import (
    ACTIONS,
    AoiState,
    ProblemInstance,
    ValidationError,
    destination_age_vector,
    energy_table,
    next_pair_table,
    pair_index,
)
from .solver import SolverError

__all__ = [
    "FleetInstance",
    "LearningSchedule",
    "PerDeviceQTable",
    "per_device_fixed_point",
    "updating_control",
    "sampling_control",
    "q_learning_update",
    "lambda_update",
    "zero_wait_policy",
    "centralized_oracle",
    "CentralizedSolution",
    "evaluate_semi_distributed",
    "JointEvaluation",
]

# w index in ACTIONS for flags (s, u); ACTIONS is ((0,0),(0,1),(1,0),(1,1))
_W_INDEX = {(s, u): w for w, (s, u) in enumerate(ACTIONS)}


@dataclass(frozen=True)
class FleetInstance:
    """K per-device problem instances; channels are mutually independent."""

    devices: tuple[ProblemInstance, ...]

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if len(self.devices) < 1:
            raise ValidationError("a fleet needs at least one device")

    @property
    def k(self) -> int:
        return len(self.devices)


@dataclass(frozen=True)
class LearningSchedule:
    """Step sizes, exploration, and reference conventions for online learning.

    The Q step for an entry on its n-th visit is n**(-q_exponent) with
    q_exponent in (0.5, 1]: positive, vanishing, divergent sum, square
    summable. The multiplier step is 1/t by global slot index: same
    properties, and with visit counts growing linearly in t the step ratio
    behaves like t**(q_exponent - 1) -> 0, so the multiplier runs on the
    slower timescale.

    Exploration (epsilon-greedy on the grant and on each device's sampling,
    probability min(1, explore_coef * t**-explore_decay)) is a deviation knob
    on top of the greedy rules; set ``explore_coef=0`` for pure greedy
    control.

    The reference offset in the Q step is re-evaluated under the current
    table and multiplier by default ('reevaluate'), using the sampling action
    recorded at the reference's most recent visit (greedy before the first
    visit). The 'cached' mode freezes the whole offset at visit time instead;
    with a reference that the trajectory rarely revisits the frozen offset
    breaks the relative normalization, so it is not the default.
    """

    q_exponent: float = 0.6
    explore_coef: float = 0.5
    explore_decay: float = 0.3
    lambda_coef: float = 1.0
    lambda_offset: float = 0.0
    lambda_init: float = 1.0
    q_init: float = 0.0
    reference: tuple = (1, 1, 0, 0)  # (a_l, a_r, h_index, u)
    reference_mode: str = "reevaluate"  # "reevaluate" | "cached"

    def __post_init__(self):
        if not 0.5 < self.q_exponent <= 1.0:
            raise ValidationError("q_exponent must lie in (0.5, 1]")
        if self.explore_coef < 0 or self.explore_decay <= 0:
            raise ValidationError("exploration parameters must be non-negative")
        if self.lambda_coef <= 0 or self.lambda_offset < 0:
            raise ValidationError("multiplier step parameters must be positive")
        if self.reference_mode not in ("cached", "reevaluate"):
            raise ValidationError(f"unknown reference mode {self.reference_mode!r}")

    def q_step(self, n: int) -> float:
        return float(n) ** -self.q_exponent

    def lambda_step(self, t: int) -> float:
        return self.lambda_coef / (self.lambda_offset + t)

    def explore_prob(self, t: int) -> float:
        if self.explore_coef == 0:
            return 0.0
        return min(1.0, self.explore_coef * float(t) ** -self.explore_decay)


@dataclass
class PerDeviceQTable:
    """Q-factors over (a_l, a_r, h_index, u) plus the device's learning state.

    ``visit_counts`` tracks per-entry update counts; ``f_ref`` caches the
    one-step target value observed at the reference state-action's most
    recent visit (0 before the first visit), and ``ref_s`` the sampling
    action chosen there (used by the re-evaluating reference mode).
    """

    q: np.ndarray
    lambda_k: float
    visit_counts: np.ndarray
    reference: tuple = (1, 1, 0, 0)
    theta: float | None = None
    f_ref: float = 0.0
    ref_s: int = 0
    ref_visited: bool = False

    @classmethod
    def zeros(cls, device: ProblemInstance, lambda_k: float, schedule: LearningSchedule):
        shape = (device.cap_l, device.cap_r, device.channel.n, 2)
        q = np.full(shape, float(schedule.q_init))
        return cls(
            q=q,
            lambda_k=float(lambda_k),
            visit_counts=np.zeros(shape, dtype=np.int64),
            reference=schedule.reference,
        )

    def greedy_update_flag(self, state: AoiState, h_index: int) -> int:
        row = self.q[state.a_l - 1, state.a_r - 1, h_index]
        return int(row[1] < row[0])


def _device_tables(device):
    ns = next_pair_table(device)
    ar = destination_age_vector(device)
    en = energy_table(device)
    pmf = np.asarray(device.channel.pmf)
    return ns, ar, en, pmf


def per_device_fixed_point(device, lambda_k, tol=1e-9, max_iters=500_000, damping=0.5):
    """Solve the per-device Q-factor fixed point by damped relative iteration.

    This is the target the online learning converges to. Q is normalized to 0
    at the reference state-action; theta is the device's optimal average
    stage cost (budget offset included).
    """
    if lambda_k < 0:
        raise ValidationError("multiplier must be >= 0")
    ns, ar, en, pmf = _device_tables(device)
    m, n_h = device.n_pairs, device.channel.n
    c_max = device.costs.c_max
    ref = (pair_index(1, 1, device.cap_r), 0, 0)

    q = np.zeros((m, n_h, 2))
    # stage cost and next pair per (s, u)
    stage = {}
    for s in (0, 1):
        for u in (0, 1):
            w = _W_INDEX[(s, u)]
            stage[(s, u)] = ar[:, None] + lambda_k * (en[w][None, :] - c_max)
    span = np.inf
    theta = 0.0
    for _ in range(max_iters):
        wv = q.min(axis=2) @ pmf  # (m,) expected next value
        tq = np.empty_like(q)
        for u in (0, 1):
            cand0 = stage[(0, u)] + wv[ns[_W_INDEX[(0, u)]]][:, None]
            cand1 = stage[(1, u)] + wv[ns[_W_INDEX[(1, u)]]][:, None]
            tq[:, :, u] = np.minimum(cand0, cand1)
        d = tq - q
        span = damping * (d.max() - d.min())
        theta = 0.5 * (d.max() + d.min())
        q += damping * d
        q -= q[ref]
        if span < tol:
            table = PerDeviceQTable(
                q=q.reshape(device.cap_l, device.cap_r, n_h, 2).copy(),
                lambda_k=float(lambda_k),
                visit_counts=np.zeros((device.cap_l, device.cap_r, n_h, 2), dtype=np.int64),
                theta=float(theta),
            )
            return table
    raise SolverError(
        f"per-device Q iteration did not reach span {tol:g} (last {span:.3e})", span=span
    )


def updating_control(q_tables, states):
    """Grant at most one update by minimizing the summed Q over feasible grants.

    ``states`` is one (AoiState, h_index) per device. Evaluates the K+1
    feasible joint update vectors; exact ties resolve toward all-idle, then
    the lowest device index. Returns the 0/1 update vector.
    """
    k = len(q_tables)
    q0 = np.empty(k)
    q1 = np.empty(k)
    for i, (table, (state, h)) in enumerate(zip(q_tables, states)):
        row = table.q[state.a_l - 1, state.a_r - 1, h]
        q0[i], q1[i] = row[0], row[1]
    options = np.concatenate([[0.0], q1 - q0])  # relative to the all-idle sum
    choice = int(np.argmin(options))
    u = np.zeros(k, dtype=np.int64)
    if choice > 0:
        u[choice - 1] = 1
    return u


def _sampling_values(device, q_table, state, h_index, granted_u):
    """One-step cost of s=0 and s=1 given the granted update flag."""
    ns, _, en, pmf = _device_tables(device)
    lam = q_table.lambda_k
    minq = q_table.q.reshape(device.n_pairs, device.channel.n, 2).min(axis=2)
    p = pair_index(state.a_l, state.a_r, device.cap_r)
    vals = np.empty(2)
    for s in (0, 1):
        w = _W_INDEX[(s, granted_u)]
        stage = state.a_r + lam * (en[w, h_index] - device.costs.c_max)
        vals[s] = stage + minq[ns[w, p]] @ pmf
    return vals


def sampling_control(device, q_table, state, h_index, granted_u):
    """Device-side sampling decision given the granted update flag; ties keep s=0."""
    vals = _sampling_values(device, q_table, state, h_index, granted_u)
    return int(vals[1] < vals[0])


def q_learning_update(device, q_table, state, h_index, granted_u, greedy_s, schedule, t):
    """One asynchronous relative Q-factor step at the visited entry.

    Moves the visited (state, u) entry toward the one-step target minus the
    reference target, stepped by the entry's own visit count. Only the
    visited entry changes. The reference target is the value cached at the
    reference state-action's most recent visit ('cached' mode) or re-evaluated
    under the current table and multiplier with the sampling action recorded
    there ('reevaluate' mode).
    """
    vals = _sampling_values(device, q_table, state, h_index, granted_u)
    f_visited = vals[greedy_s]

    idx = (state.a_l - 1, state.a_r - 1, h_index, granted_u)
    ra, rr, rh, ru = q_table.reference
    at_reference = idx == (ra - 1, rr - 1, rh, ru)
    if at_reference:
        q_table.f_ref = f_visited
        q_table.ref_s = greedy_s
        q_table.ref_visited = True
        f_ref = f_visited
    elif schedule.reference_mode == "reevaluate":
        ref_vals = _sampling_values(device, q_table, AoiState(ra, rr), rh, ru)
        f_ref = ref_vals[q_table.ref_s] if q_table.ref_visited else ref_vals.min()
    else:
        f_ref = q_table.f_ref

    q_table.visit_counts[idx] += 1
    step = schedule.q_step(int(q_table.visit_counts[idx]))
    q_table.q[idx] += step * (f_visited - f_ref - q_table.q[idx])
    return q_table


def lambda_update(lambda_k, observed_cost, c_max_k, t, schedule):
    """Projected multiplier step on the realized budget violation."""
    return max(0.0, lambda_k + schedule.lambda_step(t) * (observed_cost - c_max_k))


def zero_wait_policy(q_tables, states):
    """Grant exactly as the learned rule, but the granted device samples now.

    Returns (s_vector, u_vector); non-granted devices idle entirely.
    """
    u = updating_control(q_tables, states)
    return u.copy(), u


@dataclass
class CentralizedSolution:
    theta: float
    q: np.ndarray  # (joint pairs, joint channels, K+1)
    pair_strides: np.ndarray
    chan_strides: np.ndarray


@dataclass
class JointEvaluation:
    avg_lagrange: float
    avg_aoi: np.ndarray  # per device
    avg_energy: np.ndarray


def _joint_layout(fleet, max_states=None):
    sizes_a = [d.n_pairs for d in fleet.devices]
    sizes_h = [d.channel.n for d in fleet.devices]
    m_a = int(np.prod(sizes_a))
    m_h = int(np.prod(sizes_h))
    if max_states is not None and m_a * m_h * (fleet.k + 1) > max_states:
        raise ValidationError(
            f"joint space {m_a * m_h * (fleet.k + 1)} exceeds the oracle limit {max_states}"
        )
    stride_a = np.ones(fleet.k, dtype=np.int64)
    for i in range(fleet.k - 2, -1, -1):
        stride_a[i] = stride_a[i + 1] * sizes_a[i + 1]
    stride_h = np.ones(fleet.k, dtype=np.int64)
    for i in range(fleet.k - 2, -1, -1):
        stride_h[i] = stride_h[i + 1] * sizes_h[i + 1]
    return sizes_a, sizes_h, m_a, m_h, stride_a, stride_h


def _joint_update_options(k):
    """The K+1 feasible joint update vectors: all idle, or one device updates."""
    options = [np.zeros(k, dtype=np.int64)]
    for j in range(k):
        u = np.zeros(k, dtype=np.int64)
        u[j] = 1
        options.append(u)
    return options


def centralized_oracle(fleet, lambda_vector, tol=1e-9, max_iters=500_000, max_states=50_000):
    """Exact joint Q-factor fixed point on a tiny fleet.

    Solves the collision-feasible joint problem by damped relative iteration
    over (joint AoI pairs, joint channels, grant option). Refuses joint
    spaces above ``max_states`` entries.
    """
    k = fleet.k
    lams = np.asarray(lambda_vector, dtype=float)
    if lams.shape != (k,):
        raise ValidationError("lambda vector length must match the fleet")
    sizes_a, sizes_h, m_a, m_h, stride_a, stride_h = _joint_layout(fleet, max_states)

    dev = [_device_tables(d) for d in fleet.devices]
    # joint channel pmf and per-device channel index along the joint axis
    pmf_joint = np.ones(m_h)
    chan_idx = []
    for i, d in enumerate(fleet.devices):
        idx = (np.arange(m_h) // stride_h[i]) % sizes_h[i]
        chan_idx.append(idx)
        pmf_joint *= np.asarray(d.channel.pmf)[idx]
    pair_idx = [(np.arange(m_a) // stride_a[i]) % sizes_a[i] for i in range(k)]

    ages = np.zeros(m_a)
    for i in range(k):
        ages += dev[i][1][pair_idx[i]]

    options = _joint_update_options(k)
    s_combos = [np.array([(c >> i) & 1 for i in range(k)]) for c in range(2**k)]

    # next joint pair and energy-stage cost per (option, s-combo)
    ns_joint = np.empty((len(options), len(s_combos), m_a), dtype=np.int64)
    cost_joint = np.zeros((len(options), len(s_combos), m_h))
    for oi, u_vec in enumerate(options):
        for si, s_vec in enumerate(s_combos):
            nxt = np.zeros(m_a, dtype=np.int64)
            cost = np.zeros(m_h)
            for i in range(k):
                w = _W_INDEX[(int(s_vec[i]), int(u_vec[i]))]
                nxt += dev[i][0][w][pair_idx[i]] * stride_a[i]
                en_i = dev[i][2][w][chan_idx[i]]
                cost += lams[i] * (en_i - fleet.devices[i].costs.c_max)
            ns_joint[oi, si] = nxt
            cost_joint[oi, si] = cost

    ref = (0, 0, 0)  # all devices at (1,1), first joint channel, all-idle grant
    q = np.zeros((m_a, m_h, len(options)))
    damping = 0.5
    span = np.inf
    theta = 0.0
    for _ in range(max_iters):
        w_val = q.min(axis=2) @ pmf_joint  # (m_a,)
        tq = np.empty_like(q)
        for oi in range(len(options)):
            cand = cost_joint[oi][:, None, :] + w_val[ns_joint[oi]][:, :, None]
            tq[:, :, oi] = ages[:, None] + cand.min(axis=0)
        d = tq - q
        span = damping * (d.max() - d.min())
        theta = 0.5 * (d.max() + d.min())
        q += damping * d
        q -= q[ref]
        if span < tol:
            return CentralizedSolution(float(theta), q, stride_a, stride_h)
    raise SolverError(f"joint Q iteration did not converge (span {span:.3e})", span=span)


def evaluate_semi_distributed(fleet, q_tables, max_states=50_000):
    """Exact long-run cost of the semi-distributed policy on a tiny fleet.

    Enumerates the joint state space, applies the grant and per-device
    sampling rules, and solves the induced joint chain's stationary law (the
    channel components are i.i.d., so the pair-level chain suffices). Returns
    the average joint stage cost plus per-device AoI/energy averages.
    """
    k = fleet.k
    sizes_a, sizes_h, m_a, m_h, stride_a, stride_h = _joint_layout(fleet, max_states)
    dev = [_device_tables(d) for d in fleet.devices]
    pmf_joint = np.ones(m_h)
    chan_idx = []
    for i, d in enumerate(fleet.devices):
        idx = (np.arange(m_h) // stride_h[i]) % sizes_h[i]
        chan_idx.append(idx)
        pmf_joint *= np.asarray(d.channel.pmf)[idx]
    pair_idx = [(np.arange(m_a) // stride_a[i]) % sizes_a[i] for i in range(k)]

    lams = np.array([t.lambda_k for t in q_tables])
    t_mat = np.zeros((m_a, m_a))
    stage_avg = np.zeros(m_a)  # expected stage cost over the channel draw
    aoi_dev = np.zeros((k, m_a))
    energy_avg = np.zeros((k, m_a))
    for pa in range(m_a):
        states = []
        for i, d in enumerate(fleet.devices):
            p = int(pair_idx[i][pa])
            states.append(AoiState(p // d.cap_r + 1, p % d.cap_r + 1))
            aoi_dev[i, pa] = states[i].a_r
        for ph in range(m_h):
            hs = [int(chan_idx[i][ph]) for i in range(k)]
            u_vec = updating_control(q_tables, list(zip(states, hs)))
            nxt = 0
            cost_here = 0.0
            for i, d in enumerate(fleet.devices):
                s_i = sampling_control(d, q_tables[i], states[i], hs[i], int(u_vec[i]))
                w = _W_INDEX[(s_i, int(u_vec[i]))]
                nxt += dev[i][0][w][pair_idx[i][pa]] * stride_a[i]
                e_i = dev[i][2][w][hs[i]]
                energy_avg[i, pa] += pmf_joint[ph] * e_i
                cost_here += states[i].a_r + lams[i] * (e_i - d.costs.c_max)
            t_mat[pa, nxt] += pmf_joint[ph]
            stage_avg[pa] += pmf_joint[ph] * cost_here
    nu = stationary_distribution(t_mat)
    return JointEvaluation(
        avg_lagrange=float(nu @ stage_avg),
        avg_aoi=aoi_dev @ nu,
        avg_energy=energy_avg @ nu,
    )
