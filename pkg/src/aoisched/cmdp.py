"""Constrained solution: multiplier search, two-policy mixture, exact metrics.

The budgeted problem is solved by searching the multiplier ``lam`` for which
the per-``lam`` optimal policy's exact average energy brackets the budget,
then time-zero randomizing between the two bracketing policies so the blended
energy meets the budget exactly. The multiplier search follows the decreasing
1/m stochastic-approximation recursion with exactly evaluated energies; a
deterministic bisection (valid because the energy of the per-``lam`` optimum
is non-increasing in ``lam``) is provided as a cross-check oracle.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .model import ProblemInstance, ValidationError, destination_age_vector, energy_table, next_pair_table
from .solver import DeterministicPolicy, NotUnichainError, structure_aware_policy_iteration

__all__ = [
    "PolicyMetrics",
    "MixturePolicy",
    "MixtureSplitError",
    "RobbinsMonroResult",
    "CmdpSolution",
    "stationary_distribution",
    "exact_policy_metrics",
    "robbins_monro_lambda",
    "bisect_lambda",
    "build_mixture",
    "mixture_metrics",
    "solve_cmdp",
]


class MixtureSplitError(RuntimeError):
    """The two bracketing policies have equal energy away from the budget."""


@dataclass
class PolicyMetrics:
    """Long-run average destination age and energy per slot."""

    avg_aoi: float
    avg_energy: float


@dataclass
class MixturePolicy:
    """Time-zero randomization between two per-multiplier optimal policies.

    Pick ``pi_1`` with probability ``alpha`` once at slot 0 and follow it
    forever; long-run averages then blend linearly in ``alpha``, which is what
    the exact-budget formula for ``alpha`` requires.
    """

    pi_1: DeterministicPolicy
    pi_2: DeterministicPolicy
    alpha: float
    lambda_1: float
    lambda_2: float
    eta: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha {self.alpha} outside [0, 1]")

    def to_csv(self, path, metrics_1, metrics_2, provenance=None):
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(f"# {provenance}\n")
            w = csv.writer(f)
            w.writerow(
                ["alpha", "lambda_1", "lambda_2", "eta", "aoi_1", "energy_1", "aoi_2", "energy_2"]
            )
            w.writerow(
                [
                    repr(self.alpha),
                    repr(self.lambda_1),
                    repr(self.lambda_2),
                    repr(self.eta),
                    repr(metrics_1.avg_aoi),
                    repr(metrics_1.avg_energy),
                    repr(metrics_2.avg_aoi),
                    repr(metrics_2.avg_energy),
                ]
            )


@dataclass
class RobbinsMonroResult:
    lambda_star: float
    steps: int
    converged: bool
    trace: list  # (step, lam, avg_energy, theta)

    def trace_to_csv(self, path, provenance=None):
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(f"# {provenance}\n")
            w = csv.writer(f)
            w.writerow(["step", "lambda", "avg_energy", "theta"])
            for step, lam, ce, th in self.trace:
                w.writerow([step, repr(lam), repr(ce), repr(th)])


@dataclass
class CmdpSolution:
    lambda_star: float
    mixture: MixturePolicy
    metrics: PolicyMetrics
    metrics_1: PolicyMetrics
    metrics_2: PolicyMetrics
    robbins_monro: RobbinsMonroResult | None = None


def stationary_distribution(t):
    """Unique stationary law of a row-stochastic matrix with one closed class.

    Checks the closed-class structure first (strongly connected components
    with no outgoing edge) and raises :class:`NotUnichainError` otherwise,
    then solves the stationarity system with the normalization folded in.
    """
    m = t.shape[0]
    n_comp, labels = connected_components(
        sp.csr_matrix((t > 0).astype(np.int8)), directed=True, connection="strong"
    )
    src, dst = np.nonzero(t > 0)
    open_comp = set(labels[src[labels[src] != labels[dst]]])
    closed = [c for c in range(n_comp) if c not in open_comp]
    if len(closed) != 1:
        raise NotUnichainError(
            f"chain has {len(closed)} closed recurrent classes", closed
        )
    a = np.eye(m) - t + 1.0  # stationarity plus normalization in one solve
    nu = np.linalg.solve(a.T, np.ones(m))
    nu = np.where(nu < 0, 0.0, nu)
    nu /= nu.sum()
    return nu


def _stationary_pairs(instance, policy):
    """Stationary distribution over AoI pairs under a deterministic policy.

    The channel is i.i.d., so the stationary law factorizes into (pair
    marginal) x (channel pmf); only the pair-level chain needs solving.
    """
    ns = next_pair_table(instance)
    pmf = np.asarray(instance.channel.pmf)
    m, n_h = instance.n_pairs, instance.channel.n
    pol = policy.actions.reshape(m, n_h)

    t = np.zeros((m, m))
    rows = np.repeat(np.arange(m), n_h)
    cols = ns[pol.ravel(), rows]
    np.add.at(t, (rows, cols), np.tile(pmf, m))
    return stationary_distribution(t), pol


def exact_policy_metrics(instance, policy):
    """Exact long-run averages of a deterministic unichain policy."""
    nu, pol = _stationary_pairs(instance, policy)
    pmf = np.asarray(instance.channel.pmf)
    ar = destination_age_vector(instance)
    en = energy_table(instance)
    avg_aoi = float(nu @ ar)
    per_state_energy = (en[pol, np.arange(instance.channel.n)[None, :]] * pmf).sum(axis=1)
    avg_energy = float(nu @ per_state_energy)
    return PolicyMetrics(avg_aoi, avg_energy)


class _SolveCache:
    """Memoized per-multiplier solves keyed by lambda.

    The optimal energy is a non-increasing step function of lambda, so a query
    bracketed by two solved points with equal energy can reuse their policy
    without another solve. This keeps the 1/m multiplier recursion cheap once
    it oscillates inside one bracket.
    """

    def __init__(self, instance, tol):
        self.instance = instance
        self.tol = tol
        self.lams = []
        self.entries = []  # (policy, theta, metrics)

    def solve(self, lam):
        i = bisect.bisect_left(self.lams, lam)
        if i < len(self.lams) and self.lams[i] == lam:
            return self.entries[i]
        if 0 < i < len(self.lams):
            left, right = self.entries[i - 1], self.entries[i]
            if left[2].avg_energy == right[2].avg_energy:
                return left
        warm = None
        if self.entries:
            j = min(i, len(self.entries) - 1)
            warm = self.entries[j][0]
        policy, theta = structure_aware_policy_iteration(
            self.instance, lam, initial_policy=warm
        )
        metrics = exact_policy_metrics(self.instance, policy)
        entry = (policy, theta, metrics)
        self.lams.insert(i, lam)
        self.entries.insert(i, entry)
        return entry


def _feasible_start(cache, c_max, width):
    """Small feasible multiplier to start the 1/m recursion from.

    The 1/m steps move the iterate only logarithmically (total travel over M
    steps is about |energy - budget| * ln M), so a start far above the
    critical multiplier never arrives. Doubling finds a feasible multiplier,
    a few halvings shrink the bracket to ``width``, and the recursion then
    does the refinement inside its own oscillation envelope.
    """
    if cache.solve(0.0)[2].avg_energy <= c_max:
        return 0.0
    hi = 1.0
    while cache.solve(hi)[2].avg_energy > c_max:
        hi *= 2.0
        if hi > 1e12:
            raise ValidationError(f"no multiplier meets budget {c_max}")
    lo = hi / 2.0
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if cache.solve(mid)[2].avg_energy <= c_max:
            hi = mid
        else:
            lo = mid
    return hi


def robbins_monro_lambda(
    instance, c_max=None, max_steps=5000, tol=1e-6, lambda_init=None, cache=None
):
    """Decreasing-step search for the critical multiplier.

    Each step solves the unconstrained problem at the current multiplier,
    evaluates its exact average energy, and moves the multiplier by
    (energy - budget) / step. Stops when the move falls below ``tol`` or at
    ``max_steps``. The multiplier is clamped at 0 (a negative penalty is
    meaningless and the budget is slack there anyway).

    By default the recursion starts from a feasible multiplier located by a
    coarse geometric bracket; pass ``lambda_init`` to start elsewhere.
    """
    if c_max is None:
        c_max = instance.costs.c_max
    if c_max <= 0:
        raise ValidationError("budget must be positive")
    cache = cache or _SolveCache(instance, tol)
    if lambda_init is None:
        lambda_init = _feasible_start(cache, c_max, width=1e-3)

    lam = float(lambda_init)
    trace = []
    converged = False
    steps = 0
    for m in range(1, max_steps + 1):
        _, theta, metrics = cache.solve(lam)
        delta = (metrics.avg_energy - c_max) / m
        trace.append((m, lam, metrics.avg_energy, theta))
        new = max(0.0, lam + delta)
        steps = m
        if abs(new - lam) < tol:
            lam = new
            converged = True
            break
        lam = new
    return RobbinsMonroResult(lam, steps, converged, trace)


def bisect_lambda(instance, c_max=None, tol=1e-9, lambda_hi=None, cache=None):
    """Deterministic oracle for the smallest multiplier meeting the budget."""
    if c_max is None:
        c_max = instance.costs.c_max
    cache = cache or _SolveCache(instance, tol)
    if cache.solve(0.0)[2].avg_energy <= c_max:
        return 0.0, cache
    hi = lambda_hi if lambda_hi is not None else 100.0 * instance.cap_r / c_max
    while cache.solve(hi)[2].avg_energy > c_max:
        hi *= 2.0
        if hi > 1e12:
            raise ValidationError(f"no multiplier meets budget {c_max}")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cache.solve(mid)[2].avg_energy <= c_max:
            hi = mid
        else:
            lo = mid
    return hi, cache


def build_mixture(instance, lambda_star, eta=1e-3, c_max=None, cache=None):
    """Bracket the critical multiplier and blend the two policies exactly.

    With ``lam1 = lambda_star - eta`` and ``lam2 = lambda_star + eta``, the
    energies satisfy C(pi_1) >= budget >= C(pi_2) when the constraint is
    active; ``alpha`` is chosen so the blend hits the budget exactly. Equal
    energies at both brackets away from the budget raise
    :class:`MixtureSplitError` (retry with a larger ``eta``).
    """
    if c_max is None:
        c_max = instance.costs.c_max
    cache = cache or _SolveCache(instance, 1e-6)
    if lambda_star <= 0.0:
        policy, _, metrics = cache.solve(0.0)
        if metrics.avg_energy <= c_max + 1e-12:
            return MixturePolicy(policy, policy, 1.0, 0.0, 0.0, eta)
    lam1 = max(0.0, lambda_star - eta)
    lam2 = lambda_star + eta
    pi_1, _, m1 = cache.solve(lam1)
    pi_2, _, m2 = cache.solve(lam2)
    c1, c2 = m1.avg_energy, m2.avg_energy
    if c1 == c2:
        if abs(c1 - c_max) <= 1e-9:
            return MixturePolicy(pi_1, pi_2, 1.0, lam1, lam2, eta)
        raise MixtureSplitError(
            f"both bracketing policies spend {c1:.6g} != budget {c_max:.6g}; eta {eta:g} too small"
        )
    if not (c1 >= c_max - 1e-9 and c_max >= c2 - 1e-9):
        raise MixtureSplitError(
            f"bracket energies ({c1:.6g}, {c2:.6g}) do not straddle budget {c_max:.6g}"
        )
    alpha = (c_max - c2) / (c1 - c2)
    alpha = min(1.0, max(0.0, alpha))
    return MixturePolicy(pi_1, pi_2, alpha, lam1, lam2, eta)


def mixture_metrics(instance, mixture, cache=None):
    """Alpha-weighted blend of the two component policies' exact metrics."""
    m1 = exact_policy_metrics(instance, mixture.pi_1)
    m2 = exact_policy_metrics(instance, mixture.pi_2)
    a = mixture.alpha
    return PolicyMetrics(
        a * m1.avg_aoi + (1 - a) * m2.avg_aoi,
        a * m1.avg_energy + (1 - a) * m2.avg_energy,
    )


def solve_cmdp(
    instance,
    c_max=None,
    method="robbins-monro",
    eta=1e-3,
    max_steps=5000,
    tol=1e-6,
    max_eta_backoffs=6,
):
    """End-to-end constrained solve: multiplier search, then exact mixture.

    ``method`` picks the multiplier search ('robbins-monro' or 'bisection').
    If the bracket at ``eta`` cannot split the budget the perturbation backs
    off geometrically (x10).
    """
    if c_max is None:
        c_max = instance.costs.c_max
    cache = _SolveCache(instance, tol)
    rm = None
    if method == "robbins-monro":
        rm = robbins_monro_lambda(instance, c_max, max_steps=max_steps, tol=tol, cache=cache)
        lam_star = rm.lambda_star
    elif method == "bisection":
        lam_star, cache = bisect_lambda(instance, c_max, cache=cache)
    else:
        raise ValidationError(f"unknown method {method!r}")

    last = None
    cur_eta = eta
    for _ in range(max_eta_backoffs):
        try:
            mixture = build_mixture(instance, lam_star, cur_eta, c_max, cache=cache)
            break
        except MixtureSplitError as exc:
            last = exc
            cur_eta *= 10.0
    else:
        raise last
    m1 = exact_policy_metrics(instance, mixture.pi_1)
    m2 = exact_policy_metrics(instance, mixture.pi_2)
    blended = PolicyMetrics(
        mixture.alpha * m1.avg_aoi + (1 - mixture.alpha) * m2.avg_aoi,
        mixture.alpha * m1.avg_energy + (1 - mixture.alpha) * m2.avg_energy,
    )
    return CmdpSolution(lam_star, mixture, blended, m1, m2, rm)
