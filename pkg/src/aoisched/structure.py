"""Dominance deltas, threshold functions, and structural certification.

An action ``w`` dominates ``w'`` at a state when J(state, h, w) <= J(state,
h, w'). For each action the set of device ages (destination ages) where it
dominates everything else yields threshold functions over the other age; the
certifier checks that a solved policy is idle on the low-age block and
switches to each acting action once the relevant age crosses its threshold.

All set constructions are exhaustive scans over the age grid, mirroring the
definitions directly, with +/-inf sentinels for empty sets. Dominance
comparisons carry a 1e-9 slack for linear-system round-off, and ties are
resolved toward the structured action before a violation is flagged (the
structural claim is existence of one optimal policy with the structure).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .model import ACTIONS, IDLE, SAMPLE, SAMPLE_UPDATE, UPDATE, AoiState, CostModel
from .solver import relative_value_iteration, state_action_costs

__all__ = [
    "ThresholdReport",
    "MonotonicityReport",
    "StructureCertificate",
    "SweepReport",
    "dominance_delta",
    "compute_thresholds",
    "certify_value_monotonicity",
    "certify_dominance_monotonicity",
    "certify_threshold_structure",
    "threshold_monotonicity_sweep",
    "channel_upset_report",
    "write_region_map",
]

SLACK = 1e-9


@dataclass
class ThresholdReport:
    """Threshold functions and the idle region for one solved multiplier.

    ``phi_plus[w, a_r-1, h]`` is the largest device age where action ``w``
    dominates all others (given a_r, h), -inf if none; ``phi_minus`` the
    smallest, +inf if none. ``psi_plus`` / ``psi_minus`` are the analogues
    over the destination age given a_l. ``idle_region[a_l-1, a_r-1, h]``
    marks the block where idling dominates in both coordinates.
    """

    lam: float
    phi_plus: np.ndarray
    phi_minus: np.ndarray
    psi_plus: np.ndarray
    psi_minus: np.ndarray
    idle_region: np.ndarray

    def psi_minus_update(self):
        """Threshold for taking any action with u=1: min over the two update actions."""
        return np.minimum(self.psi_minus[UPDATE], self.psi_minus[SAMPLE_UPDATE])


@dataclass
class MonotonicityReport:
    passed: bool
    max_violation: float
    violations: list = field(default_factory=list)


@dataclass
class StructureCertificate:
    idle_ok: bool
    update_ok: bool
    sample_ok: bool
    sample_update_ok: bool
    implications_ok: bool
    violations: list = field(default_factory=list)

    @property
    def all_ok(self):
        return (
            self.idle_ok
            and self.update_ok
            and self.sample_ok
            and self.sample_update_ok
            and self.implications_ok
        )


@dataclass
class SweepReport:
    parameter: str
    grid: list
    ages: np.ndarray
    thresholds: np.ndarray  # (len(grid), len(ages))
    monotone: bool
    violations: list = field(default_factory=list)

    def to_csv(self, path, provenance=None):
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(f"# {provenance}\n")
            w = csv.writer(f)
            w.writerow([self.parameter, "age", "threshold"])
            for c, row in zip(self.grid, self.thresholds):
                for a, t in zip(self.ages, row):
                    w.writerow([repr(float(c)), int(a), repr(float(t))])


def dominance_delta(value_table, state: AoiState, h_index, w, w_prime, instance, lam=None):
    """J(state, h, w) - J(state, h, w'); negative means w dominates w'."""
    j = state_action_costs(instance, value_table, lam).j
    wi = ACTIONS.index(tuple(w)) if not isinstance(w, int) else w
    wj = ACTIONS.index(tuple(w_prime)) if not isinstance(w_prime, int) else w_prime
    row = j[state.a_l - 1, state.a_r - 1, h_index]
    return float(row[wi] - row[wj])


def _dominant_mask(j, slack=SLACK):
    """dominant[..., w] is True where w dominates every other action."""
    out = np.empty(j.shape, dtype=bool)
    for w in range(4):
        others = np.delete(j, w, axis=-1).min(axis=-1)
        out[..., w] = j[..., w] <= others + slack
    return out


def compute_thresholds(instance, value_table, lam=None, slack=SLACK):
    """Build the per-action dominance sets and reduce them to thresholds."""
    if lam is None:
        lam = value_table.lam
    j = state_action_costs(instance, value_table, lam).j  # (cap_l, cap_r, H, 4)
    dom = _dominant_mask(j, slack)
    cap_l, cap_r, n_h, _ = j.shape

    ages_l = np.arange(1, cap_l + 1, dtype=float)
    ages_r = np.arange(1, cap_r + 1, dtype=float)
    phi_plus = np.full((4, cap_r, n_h), -np.inf)
    phi_minus = np.full((4, cap_r, n_h), np.inf)
    psi_plus = np.full((4, cap_l, n_h), -np.inf)
    psi_minus = np.full((4, cap_l, n_h), np.inf)
    for w in range(4):
        d = dom[:, :, :, w]
        any_l = d.any(axis=0)  # over a_l -> (cap_r, H)
        phi_plus[w][any_l] = np.where(d, ages_l[:, None, None], -np.inf).max(axis=0)[any_l]
        phi_minus[w][any_l] = np.where(d, ages_l[:, None, None], np.inf).min(axis=0)[any_l]
        any_r = d.any(axis=1)  # over a_r -> (cap_l, H)
        psi_plus[w][any_r] = np.where(d, ages_r[None, :, None], -np.inf).max(axis=1)[any_r]
        psi_minus[w][any_r] = np.where(d, ages_r[None, :, None], np.inf).min(axis=1)[any_r]

    grid_l = ages_l[:, None, None]
    grid_r = ages_r[None, :, None]
    idle = (grid_l <= phi_plus[IDLE][None, :, :]) & (grid_r <= psi_plus[IDLE][:, None, :])
    return ThresholdReport(lam, phi_plus, phi_minus, psi_plus, psi_minus, idle)


def certify_value_monotonicity(value_table, slack=SLACK):
    """Check V is non-decreasing in both ages; violations are report content."""
    v = value_table.values
    viols = []
    worst = 0.0
    dl = v[:-1, :, :] - v[1:, :, :]
    dr = v[:, :-1, :] - v[:, 1:, :]
    for axis, d in (("a_l", dl), ("a_r", dr)):
        bad = np.argwhere(d > slack)
        for al, ar, h in bad:
            mag = float(d[al, ar, h])
            worst = max(worst, mag)
            viols.append((axis, int(al + 1), int(ar + 1), int(h), mag))
    return MonotonicityReport(passed=not viols, max_violation=worst, violations=viols)


def certify_dominance_monotonicity(instance, value_table, lam=None, slack=SLACK):
    """Check the monotone behavior of the dominance deltas along each age axis.

    Idle deltas grow with the age the alternative acts on; deltas of acting
    actions shrink along the age their own action refreshes.
    """
    j = state_action_costs(instance, value_table, lam).j
    viols = []
    worst = 0.0

    def check(delta, axis, label):
        nonlocal worst
        d = np.diff(delta, axis=axis)
        if label.startswith("idle"):
            bad = np.argwhere(d < -slack)
            mags = -d
        else:
            bad = np.argwhere(d > slack)
            mags = d
        for idx in bad[:200]:
            mag = float(mags[tuple(idx)])
            worst = max(worst, mag)
            viols.append((label, tuple(int(i) for i in idx), mag))

    check(j[..., IDLE] - j[..., SAMPLE], 0, "idle-vs-sample in a_l")
    check(j[..., IDLE] - j[..., UPDATE], 1, "idle-vs-update in a_r")
    check(j[..., IDLE] - j[..., SAMPLE_UPDATE], 1, "idle-vs-sample+update in a_r")
    for w, name in ((UPDATE, "update"), (SAMPLE_UPDATE, "sample+update")):
        for wp in range(4):
            if wp != w:
                check(j[..., w] - j[..., wp], 1, f"{name}-vs-{wp} in a_r")
    for wp in range(4):
        if wp != SAMPLE:
            check(j[..., SAMPLE] - j[..., wp], 0, f"sample-vs-{wp} in a_l")
    return MonotonicityReport(passed=not viols, max_violation=worst, violations=viols)


def certify_threshold_structure(instance, policy, value_table, lam=None, slack=SLACK):
    """Certify the four structural properties plus the growth implications.

    A state passes a property when the policy already picks the structured
    action or when that action is co-optimal within ``slack`` (ties resolve
    toward the structure).
    """
    if lam is None:
        lam = value_table.lam
    rep = compute_thresholds(instance, value_table, lam, slack)
    j = state_action_costs(instance, value_table, lam).j
    jmin = j.min(axis=-1)
    co_opt = j <= (jmin + slack)[..., None]
    acts = policy.actions
    cap_l, cap_r, n_h = acts.shape
    ages_l = np.arange(1, cap_l + 1, dtype=float)[:, None, None]
    ages_r = np.arange(1, cap_r + 1, dtype=float)[None, :, None]

    viols = []

    def accept(region, w, label):
        bad = region & (acts != w) & ~co_opt[..., w]
        ok = not bad.any()
        for al, ar, h in np.argwhere(bad)[:100]:
            viols.append((label, int(al + 1), int(ar + 1), int(h), int(acts[al, ar, h])))
        return ok

    idle_ok = accept(rep.idle_region, IDLE, "idle-region")
    update_ok = accept(ages_r >= rep.psi_minus[UPDATE][:, None, :], UPDATE, "update-threshold")
    sample_ok = accept(ages_l >= rep.phi_minus[SAMPLE][None, :, :], SAMPLE, "sample-threshold")
    su_ok = accept(
        ages_r >= rep.psi_minus[SAMPLE_UPDATE][:, None, :],
        SAMPLE_UPDATE,
        "sample+update-threshold",
    )

    # growth implications: an acting choice persists as its driving age grows
    impl_ok = True
    for w, shift_axis, label in (
        (UPDATE, 1, "update-implication"),
        (SAMPLE_UPDATE, 1, "sample+update-implication"),
        (SAMPLE, 0, "sample-implication"),
    ):
        chosen = acts == w
        if shift_axis == 1:
            src, nxt = chosen[:, :-1, :], (acts[:, 1:, :] == w) | co_opt[:, 1:, :, w]
        else:
            src, nxt = chosen[:-1, :, :], (acts[1:, :, :] == w) | co_opt[1:, :, :, w]
        bad = src & ~nxt
        if bad.any():
            impl_ok = False
            for al, ar, h in np.argwhere(bad)[:100]:
                viols.append((label, int(al + 1), int(ar + 1), int(h), w))

    return StructureCertificate(idle_ok, update_ok, sample_ok, su_ok, impl_ok, viols)


def threshold_monotonicity_sweep(base_instance, cost_grid, vary, h_index, lam, tol=1e-9):
    """Solve the instance across a cost grid and check threshold monotonicity.

    ``vary='sampling'`` sweeps the sampling cost and tracks the sample-action
    threshold over the device age per destination age; ``vary='updating'``
    sweeps the update cost scale (cost = scale / gain) and tracks the
    combined u=1 threshold per device age. Thresholds must be pointwise
    non-decreasing in the cost parameter.
    """
    rows = []
    for c in cost_grid:
        costs = base_instance.costs
        if vary == "sampling":
            costs = dataclasses.replace(costs, c_s=float(c))
        elif vary == "updating":
            c_u = tuple(float(c) / g for g in base_instance.channel.gains)
            costs = CostModel(costs.c_s, c_u, costs.c_max)
        else:
            raise ValueError(f"unknown sweep parameter {vary!r}")
        inst = dataclasses.replace(base_instance, costs=costs)
        vt = relative_value_iteration(inst, lam, tol=tol)
        rep = compute_thresholds(inst, vt)
        if vary == "sampling":
            rows.append(rep.phi_minus[SAMPLE][:, h_index])
            ages = np.arange(1, base_instance.cap_r + 1)
        else:
            rows.append(rep.psi_minus_update()[:, h_index])
            ages = np.arange(1, base_instance.cap_l + 1)
    thresholds = np.vstack(rows)

    viols = []
    with np.errstate(invalid="ignore"):
        d = np.diff(thresholds, axis=0)  # inf stays inf; inf -> finite flags below
        bad = np.argwhere(d < -1e-9)
    for i, a in bad:
        viols.append((float(cost_grid[i]), float(cost_grid[i + 1]), int(ages[a])))
    return SweepReport(
        parameter=vary,
        grid=list(cost_grid),
        ages=ages,
        thresholds=thresholds,
        monotone=not viols,
        violations=viols,
    )


def channel_upset_report(instance, policy):
    """Check that u=1 choices form a suffix of the gain-sorted alphabet.

    For each AoI pair, the channel indices whose chosen action updates must
    be an up-set. Returns (ok, violations) with one row per offending pair.
    """
    acts = policy.actions
    u_flag = np.isin(acts, (UPDATE, SAMPLE_UPDATE))
    viols = []
    cap_l, cap_r, n_h = acts.shape
    for al in range(cap_l):
        for ar in range(cap_r):
            row = u_flag[al, ar]
            if row.any():
                first = int(np.argmax(row))
                if not row[first:].all():
                    viols.append((al + 1, ar + 1, [int(h) for h in np.flatnonzero(~row[first:]) + first]))
    return not viols, viols


def write_region_map(policy, path, provenance=None):
    """Region map CSV over (a_l, a_r, h_index) with the four action labels."""
    policy.to_csv(path, provenance)


def write_certification_csv(path, rows, provenance=None):
    """One row per certified property per channel/multiplier."""
    with open(path, "w", newline="") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        w = csv.writer(f)
        w.writerow(["lambda", "property", "certified", "violations"])
        for lam, prop, ok, nviol in rows:
            w.writerow([repr(float(lam)), prop, int(bool(ok)), int(nviol)])
