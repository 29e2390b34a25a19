"""Exact solvers for the unconstrained average-cost MDP at a fixed multiplier.

Three routes to the same optimum:

* :func:`relative_value_iteration` -- damped relative value iteration with a
  span-seminorm stopping rule;
* :func:`policy_evaluation` -- exact linear-system evaluation of one policy
  (falls back to iteration above ~20k states);
* :func:`structure_aware_policy_iteration` -- policy iteration whose
  improvement step first applies the threshold implication shortcuts
  (an action optimal at one state stays optimal as the relevant age grows)
  before falling back to a full argmin.

Values are normalized to 0 at the reference state (a_l=1, a_r=1, first
channel), which is recurrent under any sensible policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .model import (
    ACTIONS,
    SAMPLE,
    SAMPLE_UPDATE,
    UPDATE,
    AoiState,
    ProblemInstance,
    ValidationError,
    destination_age_vector,
    energy_table,
    next_pair_table,
    pair_index,
)

__all__ = [
    "SolverError",
    "NotUnichainError",
    "ValueTable",
    "DeterministicPolicy",
    "StateActionCost",
    "relative_value_iteration",
    "policy_evaluation",
    "structure_aware_policy_iteration",
    "extract_greedy_policy",
    "state_action_costs",
]

# Policy-evaluation route thresholds on the full state count.
_DENSE_LIMIT = 4000
_DIRECT_LIMIT = 20000


class SolverError(RuntimeError):
    """Numerical failure; carries the last span seminorm when applicable."""

    def __init__(self, message, span=None):
        super().__init__(message)
        self.span = span


class NotUnichainError(SolverError):
    """The evaluated policy induces more than one closed recurrent class."""

    def __init__(self, message, classes):
        super().__init__(message)
        self.classes = classes


@dataclass
class ValueTable:
    """Differential values over (a_l, a_r, h_index) with the solved multiplier.

    ``values[a_l-1, a_r-1, h]`` is the relative value; ``theta`` is the
    optimal (or evaluated) average cost per slot.
    """

    values: np.ndarray
    lam: float
    theta: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or not np.isfinite(self.theta):
            raise ValidationError("value table contains non-finite entries")

    def to_csv(self, path, provenance=None):
        cap_l, cap_r, n_h = self.values.shape
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(f"# {provenance}\n")
            w = csv.writer(f)
            w.writerow(["a_l", "a_r", "h_index", "value"])
            for al in range(cap_l):
                for ar in range(cap_r):
                    for h in range(n_h):
                        w.writerow([al + 1, ar + 1, h, repr(float(self.values[al, ar, h]))])


@dataclass
class DeterministicPolicy:
    """Action table over (a_l, a_r, h_index); entries index into ``ACTIONS``."""

    actions: np.ndarray

    def __post_init__(self):
        if self.actions.min() < 0 or self.actions.max() > 3:
            raise ValidationError("policy entries must index the four actions")

    def action_at(self, state: AoiState, h_index: int) -> tuple[int, int]:
        return ACTIONS[int(self.actions[state.a_l - 1, state.a_r - 1, h_index])]

    def to_csv(self, path, provenance=None):
        cap_l, cap_r, n_h = self.actions.shape
        labels = ("idle", "update", "sample", "sample+update")
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(f"# {provenance}\n")
            w = csv.writer(f)
            w.writerow(["a_l", "a_r", "h_index", "s", "u", "action"])
            for al in range(cap_l):
                for ar in range(cap_r):
                    for h in range(n_h):
                        a = int(self.actions[al, ar, h])
                        s, u = ACTIONS[a]
                        w.writerow([al + 1, ar + 1, h, s, u, labels[a]])


@dataclass
class StateActionCost:
    """State-action costs J(a_l, a_r, h, w) = stage cost + expected next value."""

    j: np.ndarray
    lam: float


def _dyn(instance):
    """Shared dense dynamics: next-pair table, age vector, energy, pmf."""
    ns = next_pair_table(instance)
    ar = destination_age_vector(instance)
    en = energy_table(instance)
    pmf = np.asarray(instance.channel.pmf)
    return ns, ar, en, pmf


def _ref_flat(instance, reference_state=None):
    if reference_state is None:
        return pair_index(1, 1, instance.cap_r), 0
    state, h = reference_state
    instance.validate_state(state)
    return pair_index(state.a_l, state.a_r, instance.cap_r), h


def relative_value_iteration(instance, lam, tol=1e-9, max_iters=200_000, damping=0.5):
    """Solve the Bellman equation at multiplier ``lam`` by damped RVI.

    Iterates V <- (1-damping) V + damping (T V), normalized so the reference
    state stays at 0, until the span seminorm of the successive difference
    drops below ``tol``. The damping is the standard aperiodicity transform;
    the returned ``theta`` is the midpoint of the one-step cost bounds, so its
    error is at most ``tol / (2 * damping)``.
    """
    if lam < 0:
        raise ValidationError("multiplier must be >= 0")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    ns, ar, en, pmf = _dyn(instance)
    m, n_h = instance.n_pairs, instance.channel.n
    rp, rh = _ref_flat(instance)

    V = np.zeros((m, n_h))
    stage = ar[None, :, None] + lam * en[:, None, :]  # (4, m, H)
    span = np.inf
    for _ in range(max_iters):
        ev = V @ pmf
        tv = (stage + ev[ns][:, :, None]).min(axis=0)
        d = tv - V
        span = damping * (d.max() - d.min())
        theta = 0.5 * (d.max() + d.min())
        V += damping * d
        V -= V[rp, rh]
        if span < tol:
            return ValueTable(V.reshape(instance.cap_l, instance.cap_r, n_h), lam, float(theta))
    raise SolverError(
        f"relative value iteration did not reach span {tol:g} in {max_iters} iterations "
        f"(last span {span:.3e})",
        span=span,
    )


def _closed_classes(instance, pol_flat):
    """Closed recurrent classes of the pair-level chain induced by a policy.

    The channel draw is i.i.d., so two states communicate iff their AoI pairs
    do; the analysis runs on the (a_l, a_r) graph with one edge per channel.
    """
    ns, _, _, _ = _dyn(instance)
    m, n_h = instance.n_pairs, instance.channel.n
    rows = np.repeat(np.arange(m), n_h)
    cols = ns[pol_flat.ravel(), rows]
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m, m))
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    open_comp = set()
    coo = adj.tocoo()
    for i, j in zip(coo.row, coo.col):
        if labels[i] != labels[j]:
            open_comp.add(labels[i])
    closed = [c for c in range(n_comp) if c not in open_comp]
    cap_r = instance.cap_r
    out = []
    for c in closed:
        members = np.flatnonzero(labels == c)
        out.append([(int(p // cap_r) + 1, int(p % cap_r) + 1) for p in members])
    return out


def policy_evaluation(instance, policy, lam, reference_state=None):
    """Exact average cost and values of a deterministic unichain policy.

    Solves the evaluation linear system with V(reference) = 0 directly for
    state spaces up to ~20k (dense below 4k, sparse LU above), and by relative
    iteration under the fixed policy beyond that. Raises
    :class:`NotUnichainError` when the induced chain has multiple closed
    recurrent classes.
    """
    if lam < 0:
        raise ValidationError("multiplier must be >= 0")
    ns, ar, en, pmf = _dyn(instance)
    m, n_h = instance.n_pairs, instance.channel.n
    n = m * n_h
    rp, rh = _ref_flat(instance, reference_state)
    ref = rp * n_h + rh

    pol = policy.actions.reshape(m, n_h)
    classes = _closed_classes(instance, pol)
    if len(classes) != 1:
        heads = "; ".join(str(c[:4]) for c in classes)
        raise NotUnichainError(
            f"policy induces {len(classes)} closed recurrent classes (examples: {heads})",
            classes,
        )

    nsp = ns[pol, np.arange(m)[:, None]]  # (m, H) next pair per state
    stage = ar[:, None] + lam * en[pol, np.arange(n_h)[None, :]]  # L(p, h) under the policy

    if n <= _DIRECT_LIMIT:
        rows = np.repeat(np.arange(n), n_h)
        cols = (nsp.ravel()[:, None] * n_h + np.arange(n_h)[None, :]).ravel()
        vals = np.tile(pmf, n)
        if n <= _DENSE_LIMIT:
            A = np.zeros((n + 1, n + 1))
            A[np.arange(n), np.arange(n)] = 1.0
            np.subtract.at(A, (rows, cols), vals)
            A[:n, n] = 1.0
            A[n, ref] = 1.0
            b = np.concatenate([stage.ravel(), [0.0]])
            x = np.linalg.solve(A, b)
        else:
            eye = sp.eye(n, format="coo")
            trans = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
            top = sp.hstack([eye - trans, np.ones((n, 1))])
            bottom = sp.coo_matrix(([1.0], ([0], [ref])), shape=(1, n + 1))
            A = sp.vstack([top, bottom]).tocsc()
            b = np.concatenate([stage.ravel(), [0.0]])
            x = sp.linalg.spsolve(A, b)
        if not np.all(np.isfinite(x)):
            raise SolverError("policy evaluation system is singular")
        V = x[:n].reshape(m, n_h)
        theta = float(x[n])
    else:
        V = np.zeros((m, n_h))
        damping = 0.5
        theta = None
        for _ in range(2_000_000):
            ev = V @ pmf
            tv = stage + ev[nsp]
            d = tv - V
            span = damping * (d.max() - d.min())
            theta = 0.5 * (d.max() + d.min())
            V += damping * d
            V -= V[rp, rh]
            if span < 1e-10:
                break
        else:
            raise SolverError("fixed-policy value iteration did not converge", span=span)

    vt = ValueTable(V.reshape(instance.cap_l, instance.cap_r, n_h), lam, float(theta))
    return float(theta), vt


def state_action_costs(instance, value_table, lam=None):
    """J(state, h, w) = stage cost + expected next value, for a solved table."""
    if lam is None:
        lam = value_table.lam
    ns, ar, en, pmf = _dyn(instance)
    m, n_h = instance.n_pairs, instance.channel.n
    V = value_table.values.reshape(m, n_h)
    ev = V @ pmf
    j = ar[None, :, None] + lam * en[:, None, :] + ev[ns][:, :, None]  # (4, m, H)
    j = np.moveaxis(j, 0, -1).reshape(instance.cap_l, instance.cap_r, n_h, 4)
    return StateActionCost(np.ascontiguousarray(j), lam)


def extract_greedy_policy(instance, value_table, lam=None):
    """Per-state argmin of J; exact ties go to the fixed action order."""
    j = state_action_costs(instance, value_table, lam).j
    return DeterministicPolicy(j.argmin(axis=-1).astype(np.uint8))


def _improve(instance, j_flat, out):
    """One structured improvement sweep.

    States are visited in increasing (a_l, a_r) order within each channel so
    the implication shortcuts can consult the already-assigned neighbor
    entries of the policy being built.
    """
    cap_l, cap_r = instance.cap_l, instance.cap_r
    n_h = instance.channel.n
    fallback = j_flat.argmin(axis=-1)
    for h in range(n_h):
        for al in range(cap_l):
            base = al * cap_r
            for ar in range(cap_r):
                p = base + ar
                if ar > 0 and out[p - 1, h] == UPDATE:
                    out[p, h] = UPDATE
                elif al > 0 and out[p - cap_r, h] == SAMPLE:
                    out[p, h] = SAMPLE
                elif ar > 0 and out[p - 1, h] == SAMPLE_UPDATE:
                    out[p, h] = SAMPLE_UPDATE
                else:
                    out[p, h] = fallback[p, h]


def structure_aware_policy_iteration(
    instance, lam, initial_policy=None, max_iters=500, residual_tol=1e-9
):
    """Policy iteration with threshold implication shortcuts in the improvement.

    Starts from the all-idle policy, alternates exact evaluation with the
    structured improvement sweep, and stops when the policy is unchanged. If
    co-optimal policies alternate over exact ties, the Bellman residual check
    ends the loop instead; a repeat of an earlier policy without either exit
    trips the cycle guard.
    """
    if lam < 0:
        raise ValidationError("multiplier must be >= 0")
    ns, ar, en, pmf = _dyn(instance)
    m, n_h = instance.n_pairs, instance.channel.n
    shape = (instance.cap_l, instance.cap_r, n_h)

    if initial_policy is None:
        pol = np.zeros((m, n_h), dtype=np.uint8)
    else:
        pol = initial_policy.actions.reshape(m, n_h).astype(np.uint8).copy()
    stage = ar[None, :, None] + lam * en[:, None, :]
    seen = {pol.tobytes()}

    theta = None
    for _ in range(max_iters):
        theta, vt = policy_evaluation(instance, DeterministicPolicy(pol.reshape(shape)), lam)
        V = vt.values.reshape(m, n_h)
        ev = V @ pmf
        j = np.moveaxis(stage + ev[ns][:, :, None], 0, -1)  # (m, H, 4)

        new = np.empty_like(pol)
        _improve(instance, j, new)
        if np.array_equal(new, pol):
            return DeterministicPolicy(pol.reshape(shape)), float(theta)

        residual = np.abs(theta + V - j.min(axis=-1)).max()
        if residual <= residual_tol:
            # ties between co-optimal policies; the evaluated one is optimal
            theta2, _ = policy_evaluation(
                instance, DeterministicPolicy(new.reshape(shape)), lam
            )
            if abs(theta2 - theta) <= residual_tol:
                return DeterministicPolicy(new.reshape(shape)), float(theta2)
            return DeterministicPolicy(pol.reshape(shape)), float(theta)

        key = new.tobytes()
        if key in seen:
            raise SolverError("policy iteration cycled without reaching the Bellman residual")
        seen.add(key)
        pol = new
    raise SolverError(f"policy iteration did not converge in {max_iters} iterations")
