"""Stochastic-dominance orderings on channel distributions and AoI comparisons.

On a shared finite gain alphabet, first-order dominance is a pointwise CDF
comparison and second-order dominance compares the gap-weighted partial sums
of the CDF (the integrated CDF at the alphabet knots); both are exact, no
function-class quantification needed. A dominant channel can only help: the
constrained-optimal average age under the dominant distribution is no larger,
provided (for the second-order case) the update cost is decreasing and convex
in the gain.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .cmdp import solve_cmdp
from .model import ChannelModel, ValidationError

__all__ = [
    "DominanceVerdict",
    "ComparisonResult",
    "first_order_dominates",
    "second_order_dominates",
    "classify_dominance",
    "compare_optimal_aoi",
]

_TOL = 1e-12


@dataclass(frozen=True)
class DominanceVerdict:
    relation: str  # "first-order" | "second-order" | "none"
    direction: str  # "I over J" | "J over I" | "incomparable" | "equal"


@dataclass
class ComparisonResult:
    aoi_i: float
    aoi_j: float
    verdict: DominanceVerdict
    asserted: bool
    holds: bool | None


def _check_same_alphabet(dist_i: ChannelModel, dist_j: ChannelModel):
    if dist_i.gains != dist_j.gains:
        raise ValidationError("distributions must share the same gain alphabet")


def first_order_dominates(dist_i: ChannelModel, dist_j: ChannelModel) -> bool:
    """True iff every increasing payoff prefers I: CDF of I pointwise <= CDF of J."""
    _check_same_alphabet(dist_i, dist_j)
    return bool(np.all(dist_i.cdf() <= dist_j.cdf() + _TOL))


def second_order_dominates(dist_i: ChannelModel, dist_j: ChannelModel) -> bool:
    """True iff every increasing concave payoff prefers I.

    Finite-alphabet criterion: the integrated CDF of I at every alphabet knot
    is <= that of J. The integrated CDFs are piecewise linear with knots on
    the shared alphabet, so checking the knots is exact.
    """
    _check_same_alphabet(dist_i, dist_j)
    gains = np.asarray(dist_i.gains)
    gaps = np.diff(gains)
    ii = np.concatenate([[0.0], np.cumsum(dist_i.cdf()[:-1] * gaps)])
    ij = np.concatenate([[0.0], np.cumsum(dist_j.cdf()[:-1] * gaps)])
    return bool(np.all(ii <= ij + _TOL))


def classify_dominance(dist_i: ChannelModel, dist_j: ChannelModel) -> DominanceVerdict:
    fo_ij = first_order_dominates(dist_i, dist_j)
    fo_ji = first_order_dominates(dist_j, dist_i)
    if fo_ij and fo_ji:
        return DominanceVerdict("first-order", "equal")
    if fo_ij:
        return DominanceVerdict("first-order", "I over J")
    if fo_ji:
        return DominanceVerdict("first-order", "J over I")
    so_ij = second_order_dominates(dist_i, dist_j)
    so_ji = second_order_dominates(dist_j, dist_i)
    if so_ij and so_ji:
        return DominanceVerdict("second-order", "equal")
    if so_ij:
        return DominanceVerdict("second-order", "I over J")
    if so_ji:
        return DominanceVerdict("second-order", "J over I")
    return DominanceVerdict("none", "incomparable")


def _update_cost_decreasing_convex(gains, c_u):
    gains = np.asarray(gains, dtype=float)
    c_u = np.asarray(c_u, dtype=float)
    if np.any(np.diff(c_u) > _TOL):
        return False
    slopes = np.diff(c_u) / np.diff(gains)
    return bool(np.all(np.diff(slopes) >= -_TOL))


def compare_optimal_aoi(instance_template, dist_i, dist_j, c_max=None, tol=1e-6):
    """Solve the constrained problem under each distribution and compare.

    The assertion ``aoi_i <= aoi_j + tol`` is made when I dominates J
    first-order, or second-order with an update cost that is decreasing and
    convex in the gain. Without a valid precondition the values are returned
    unasserted.
    """
    _check_same_alphabet(dist_i, dist_j)
    if c_max is None:
        c_max = instance_template.costs.c_max
    verdict = classify_dominance(dist_i, dist_j)

    asserted = False
    if verdict.direction in ("I over J", "equal"):
        if verdict.relation == "first-order":
            asserted = True
        elif verdict.relation == "second-order":
            asserted = _update_cost_decreasing_convex(
                instance_template.channel.gains, instance_template.costs.c_u
            )

    sol_i = solve_cmdp(
        dataclasses.replace(instance_template, channel=dist_i), c_max, method="bisection"
    )
    sol_j = solve_cmdp(
        dataclasses.replace(instance_template, channel=dist_j), c_max, method="bisection"
    )
    aoi_i, aoi_j = sol_i.metrics.avg_aoi, sol_j.metrics.avg_aoi
    holds = (aoi_i <= aoi_j + tol) if asserted else None
    return ComparisonResult(aoi_i, aoi_j, verdict, asserted, holds)


def write_comparison_csv(path, rows, provenance=None):
    """rows: (pair label, mean gain I, mean gain J, aoi I, aoi J, verdict, asserted, holds)."""
    with open(path, "w", newline="") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        w = csv.writer(f)
        w.writerow(
            ["pair", "mean_gain_i", "mean_gain_j", "aoi_i", "aoi_j", "relation", "direction", "asserted", "holds"]
        )
        for row in rows:
            w.writerow(row)
