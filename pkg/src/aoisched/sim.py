"""Seeded slot-synchronous simulation for single-device policies and fleets.

Randomness comes from named counter-based substreams (Philox keyed by a hash
of seed, purpose, and device), so adding devices or purposes never perturbs
existing streams and identical (seed, config, instance) runs are bit-identical.

Fleet runs execute the semi-distributed loop in lockstep: devices report
their two Q-values for the local state, the destination grants at most one
update, devices choose sampling actions, then every device applies its
Q-factor and multiplier steps. The zero-wait controller shares the grant rule
and the learning updates but samples exactly when granted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .fleet import LearningSchedule, PerDeviceQTable
from .model import (
    ValidationError,
    destination_age_vector,
    energy_table,
    next_pair_table,
    pair_index,
)

__all__ = ["SimConfig", "Metrics", "FleetRunResult", "substream", "run_single", "run_fleet"]


def substream(seed, *labels):
    """Independent generator for (seed, labels); stable across config growth."""
    tag = str(int(seed)) + "/" + "/".join(str(x) for x in labels)
    digest = hashlib.blake2b(tag.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimConfig:
    """Horizon, seed, burn-in, and replication count for a run.

    ``burn_in=None`` resolves to 0 for deterministic-policy runs and to 20%
    of the horizon for learning runs (the learning transient).
    """

    horizon: int
    seed: int
    burn_in: int | None = None
    replications: int = 1

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.horizon:
            raise ValidationError("burn-in must satisfy 0 <= burn_in < horizon")
        if self.replications < 1:
            raise ValidationError("replication count must be >= 1")


@dataclass
class Metrics:
    """Averages of destination age and energy over the post-burn-in window.

    Scalar-valued for single-device runs, per-device arrays for fleet runs.
    Standard errors come from 100 non-overlapping batch means (the slot
    sequence is correlated), or across replications when there are several.
    """

    avg_aoi: object
    avg_energy: object
    se_aoi: object
    se_energy: object
    slots: int


@dataclass
class FleetRunResult:
    metrics: Metrics
    q_tables: list
    lambdas: np.ndarray
    convergence: list  # (window_end, max_dq, max_dlambda, window_aoi, window_energy)
    converged_at: int | None
    trace: list = field(default_factory=list)


_N_BATCHES = 100


def _batch_se(series):
    """Batch-means standard error of the mean of a correlated series."""
    n = series.size
    if n < 2 * _N_BATCHES:
        return float(series.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    usable = n - n % _N_BATCHES
    means = series[:usable].reshape(_N_BATCHES, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(_N_BATCHES))


def _draw_channels(channel, gen, horizon):
    cdf = np.cumsum(channel.pmf)
    cdf[-1] = 1.0  # guard the top bin against pmf round-off
    return np.searchsorted(cdf, gen.random(horizon), side="right").astype(np.int64)


def run_single(instance, policy, config):
    """Simulate a deterministic or mixture policy on one device.

    Mixture policies draw which component to follow once at slot 0 of each
    replication (time-zero randomization) and results average over
    replications.
    """
    ns = next_pair_table(instance)
    en = energy_table(instance)
    ar = destination_age_vector(instance)
    burn = config.burn_in if config.burn_in is not None else 0

    tables = []
    weights = []
    if hasattr(policy, "alpha"):  # mixture
        tables = [
            policy.pi_1.actions.reshape(instance.n_pairs, instance.channel.n),
            policy.pi_2.actions.reshape(instance.n_pairs, instance.channel.n),
        ]
        weights = [policy.alpha, 1.0 - policy.alpha]
    else:
        tables = [policy.actions.reshape(instance.n_pairs, instance.channel.n)]
        weights = [1.0]

    rep_aoi, rep_energy, rep_se_aoi, rep_se_energy = [], [], [], []
    for rep in range(config.replications):
        chan = _draw_channels(instance.channel, substream(config.seed, "channel", rep), config.horizon)
        if len(tables) == 2:
            coin = substream(config.seed, "mixture", rep).random()
            pol = tables[0] if coin < weights[0] else tables[1]
        else:
            pol = tables[0]
        aoi = np.empty(config.horizon)
        energy = np.empty(config.horizon)
        p = pair_index(1, 1, instance.cap_r)
        for t in range(config.horizon):
            h = chan[t]
            a = pol[p, h]
            aoi[t] = ar[p]
            energy[t] = en[a, h]
            p = ns[a, p]
        aoi, energy = aoi[burn:], energy[burn:]
        rep_aoi.append(aoi.mean())
        rep_energy.append(energy.mean())
        rep_se_aoi.append(_batch_se(aoi))
        rep_se_energy.append(_batch_se(energy))

    if config.replications > 1:
        r = np.sqrt(config.replications)
        return Metrics(
            float(np.mean(rep_aoi)),
            float(np.mean(rep_energy)),
            float(np.std(rep_aoi, ddof=1) / r),
            float(np.std(rep_energy, ddof=1) / r),
            config.horizon - burn,
        )
    return Metrics(
        float(rep_aoi[0]), float(rep_energy[0]), rep_se_aoi[0], rep_se_energy[0],
        config.horizon - burn,
    )


def run_fleet(
    fleet,
    controller,
    schedule,
    config,
    q_tables=None,
    trace_every=0,
    window=1000,
    conv_q_tol=1e-3,
    conv_lambda_tol=1e-4,
):
    """Run the semi-distributed learning loop (or its zero-wait variant).

    Returns per-device metrics over the post-burn-in window, the final
    Q-tables and multipliers, per-window convergence rows, and the first
    window end where the successive-change norms fell below the tolerances.
    """
    if controller not in ("learned", "zero-wait"):
        raise ValidationError(f"unknown controller {controller!r}")
    if not isinstance(schedule, LearningSchedule):
        raise ValidationError("schedule must be a LearningSchedule")
    k = fleet.k
    horizon = config.horizon
    burn = config.burn_in if config.burn_in is not None else horizon // 5

    # per-device read-only tables and mutable learning state
    ns, en, ar, pmf, c_s, c_u, c_max = [], [], [], [], [], [], []
    q, minq, visits = [], [], []
    lam = np.empty(k)
    f_ref = np.zeros(k)
    ref_s = np.zeros(k, dtype=np.int64)
    ref_visited = np.zeros(k, dtype=bool)
    ref_flat = []
    chan_seq = []
    for i, d in enumerate(fleet.devices):
        ns.append(next_pair_table(d))
        en.append(energy_table(d))
        ar.append(destination_age_vector(d))
        pmf.append(np.asarray(d.channel.pmf))
        c_s.append(d.costs.c_s)
        c_u.append(np.asarray(d.costs.c_u))
        c_max.append(d.costs.c_max)
        if q_tables is not None:
            src = q_tables[i]
            q.append(src.q.reshape(d.n_pairs, d.channel.n, 2).astype(float).copy())
            lam[i] = src.lambda_k
        else:
            q.append(np.full((d.n_pairs, d.channel.n, 2), float(schedule.q_init)))
            lam[i] = schedule.lambda_init
        minq.append(q[i].min(axis=2))
        visits.append(np.zeros((d.n_pairs, d.channel.n, 2), dtype=np.int64))
        ra, rr, rh, ru = schedule.reference
        ref_flat.append((pair_index(ra, rr, d.cap_r), rh, ru))
        chan_seq.append(_draw_channels(d.channel, substream(config.seed, "channel", i), horizon))

    explore = schedule.explore_coef > 0
    if explore:
        g_gate = substream(config.seed, "explore-grant").random(horizon)
        g_pick = substream(config.seed, "explore-grant-pick").integers(0, k + 1, horizon)
        s_gate = [substream(config.seed, "explore-sample", i).random(horizon) for i in range(k)]
        s_pick = [
            substream(config.seed, "explore-sample-pick", i).integers(0, 2, horizon)
            for i in range(k)
        ]

    pair = [pair_index(1, 1, d.cap_r) for d in fleet.devices]
    aoi_acc = np.zeros((k, horizon))
    energy_acc = np.zeros((k, horizon))
    trace = []
    convergence = []
    converged_at = None
    q_snap = [qi.copy() for qi in q]
    lam_snap = lam.copy()
    zero_wait = controller == "zero-wait"
    reevaluate = schedule.reference_mode == "reevaluate"
    lam_coef = schedule.lambda_coef
    lam_t0 = schedule.lambda_offset

    for t in range(1, horizon + 1):
        ti = t - 1
        hs = [int(cs[ti]) for cs in chan_seq]
        # destination grant: minimize summed Q over the K+1 feasible grants
        best_j, best_delta = -1, 0.0
        for i in range(k):
            row = q[i][pair[i], hs[i]]
            delta = row[1] - row[0]
            if delta < best_delta:
                best_delta, best_j = delta, i
        choice = best_j + 1  # 0 = all idle
        if explore and g_gate[ti] < schedule.explore_prob(t):
            choice = int(g_pick[ti])

        for i in range(k):
            u_i = 1 if choice == i + 1 else 0
            p, h = pair[i], hs[i]
            lam_i = lam[i]
            # one-step values of s=0 and s=1 under the granted flag
            w0, w1 = u_i, 2 + u_i  # action indices (0,u) and (1,u)
            v0 = lam_i * (en[i][w0, h] - c_max[i]) + minq[i][ns[i][w0, p]] @ pmf[i]
            v1 = lam_i * (en[i][w1, h] - c_max[i]) + minq[i][ns[i][w1, p]] @ pmf[i]
            if zero_wait:
                s_rule = u_i
            else:
                s_rule = 1 if v1 < v0 else 0
            s_exec = s_rule
            if explore and not zero_wait and s_gate[i][ti] < schedule.explore_prob(t):
                s_exec = int(s_pick[i][ti])

            age = ar[i][p]
            f_visited = age + (v1 if s_rule else v0)
            idx = (p, h, u_i)
            if idx == ref_flat[i]:
                f_ref[i] = f_visited
                ref_s[i] = s_rule
                ref_visited[i] = True
                ref_val = f_visited
            elif reevaluate:
                rp, rh, ru = ref_flat[i]
                base = ar[i][rp] - lam_i * c_max[i]
                r0 = base + lam_i * en[i][ru, rh] + minq[i][ns[i][ru, rp]] @ pmf[i]
                if ref_visited[i]:
                    if ref_s[i]:
                        r0 = base + lam_i * en[i][2 + ru, rh] + minq[i][ns[i][2 + ru, rp]] @ pmf[i]
                    ref_val = r0
                else:
                    r1 = base + lam_i * en[i][2 + ru, rh] + minq[i][ns[i][2 + ru, rp]] @ pmf[i]
                    ref_val = r0 if r0 <= r1 else r1
            else:
                ref_val = f_ref[i]

            visits[i][idx] += 1
            step = float(visits[i][idx]) ** -schedule.q_exponent
            qv = q[i][idx] + step * (f_visited - ref_val - q[i][idx])
            q[i][idx] = qv
            row = q[i][p, h]
            minq[i][p, h] = row[0] if row[0] <= row[1] else row[1]

            cost = s_exec * c_s[i] + (c_u[i][h] if u_i else 0.0)
            lam[i] = max(0.0, lam[i] + lam_coef * (cost - c_max[i]) / (lam_t0 + t))
            aoi_acc[i, ti] = age
            energy_acc[i, ti] = cost
            if trace_every and t % trace_every == 0:
                d = fleet.devices[i]
                trace.append(
                    (t, i, p // d.cap_r + 1, p % d.cap_r + 1, h, s_exec, u_i, cost, lam[i])
                )
            pair[i] = ns[i][2 * s_exec + u_i, p]

        if t % window == 0:
            max_dq = max(float(np.abs(qi - si).max()) for qi, si in zip(q, q_snap))
            max_dl = float(np.abs(lam - lam_snap).max())
            w_aoi = float(aoi_acc[:, t - window : t].mean())
            w_energy = float(energy_acc[:, t - window : t].mean())
            convergence.append((t, max_dq, max_dl, w_aoi, w_energy))
            if converged_at is None and max_dq < conv_q_tol and max_dl < conv_lambda_tol:
                converged_at = t
            q_snap = [qi.copy() for qi in q]
            lam_snap = lam.copy()

    post_aoi = aoi_acc[:, burn:]
    post_energy = energy_acc[:, burn:]
    metrics = Metrics(
        post_aoi.mean(axis=1),
        post_energy.mean(axis=1),
        np.array([_batch_se(row) for row in post_aoi]),
        np.array([_batch_se(row) for row in post_energy]),
        horizon - burn,
    )
    out_tables = []
    for i, d in enumerate(fleet.devices):
        out_tables.append(
            PerDeviceQTable(
                q=q[i].reshape(d.cap_l, d.cap_r, d.channel.n, 2),
                lambda_k=float(lam[i]),
                visit_counts=visits[i].reshape(d.cap_l, d.cap_r, d.channel.n, 2),
                reference=schedule.reference,
                f_ref=float(f_ref[i]),
                ref_s=int(ref_s[i]),
                ref_visited=bool(ref_visited[i]),
            )
        )
    return FleetRunResult(metrics, out_tables, lam.copy(), convergence, converged_at, trace)
