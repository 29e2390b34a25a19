"""Command-line entry points: load a config, run an experiment, emit CSV.

One YAML config file per experiment, with nested sections (instance, solver,
structure, dominance, fleet, schedule, sim, output). Unknown keys are
rejected with file:line messages. Every output CSV starts with a provenance
comment (config hash, seed, package version) and reruns with identical
config+seed produce byte-identical files.

Exit codes: 0 success, 1 config validation, 2 numerical failure,
3 certification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cmdp import exact_policy_metrics, solve_cmdp
from .dominance import compare_optimal_aoi, write_comparison_csv
from .fleet import FleetInstance, LearningSchedule
from .model import ChannelModel, CostModel, ProblemInstance, ValidationError
from .sim import SimConfig, run_fleet, substream
from .solver import SolverError, relative_value_iteration, structure_aware_policy_iteration
from .structure import (
    certify_dominance_monotonicity,
    certify_threshold_structure,
    certify_value_monotonicity,
    channel_upset_report,
    threshold_monotonicity_sweep,
    write_certification_csv,
)

log = logging.getLogger("aoisched")


class ConfigError(Exception):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(prefix + message)


class CertificationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config loading

def _line_map(text):
    """Map of key paths to 1-based line numbers, from the YAML node tree."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key_node, val_node in node.value:
                p = path + (str(key_node.value),)
                lines[p] = key_node.start_mark.line + 1
                walk(val_node, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, path + (str(i),))

    walk(root, ())
    return lines


_NUM = (int, float)

_CHANNEL_SCHEMA = {"gains": list, "pmf": list, "pmf_weights": list}
_COSTS_SCHEMA = {
    "sampling": _NUM,
    "update_per_gain": list,
    "update_scale_over_gain": _NUM,
    "budget": _NUM,
}
_INSTANCE_SCHEMA = {
    "cap_l": int,
    "cap_r": int,
    "channel": _CHANNEL_SCHEMA,
    "costs": _COSTS_SCHEMA,
}
_SCHEMAS = {
    "solve-single": {
        "instance": _INSTANCE_SCHEMA,
        "solver": {"method": str, "eta": _NUM, "tolerance": _NUM, "max_steps": int},
        "sweep": {"budgets": list},
        "seed": int,
        "output": {"dir": str},
    },
    "structure": {
        "instance": _INSTANCE_SCHEMA,
        "structure": {
            "lambda_grid": list,
            "sampling_cost_grid": list,
            "sampling_gain": _NUM,
            "updating_cost_grid": list,
            "updating_gain": _NUM,
        },
        "seed": int,
        "output": {"dir": str},
    },
    "dominance": {
        "instance": _INSTANCE_SCHEMA,
        "dominance": {"budget": _NUM, "distributions": dict, "pairs": list},
        "seed": int,
        "output": {"dir": str},
    },
    "fleet": {
        "fleet": {
            "devices": int,
            "cap_l": int,
            "cap_r": int,
            "channel": _CHANNEL_SCHEMA,
            "costs": {
                "sampling_range": list,
                "update_scale_range": list,
                "budget": _NUM,
            },
        },
        "schedule": {
            "q_exponent": _NUM,
            "explore_coef": _NUM,
            "explore_decay": _NUM,
            "lambda_init": _NUM,
            "reference_mode": str,
        },
        "sim": {
            "horizon": int,
            "seed": int,
            "burn_in_fraction": _NUM,
            "window": int,
            "trace_every": int,
            "replications": int,
        },
        "controllers": list,
        "budget_grid": list,
        "output": {"dir": str},
    },
}


def _validate(data, schema, lines, src, path=()):
    if not isinstance(data, dict):
        raise ConfigError(
            f"section {'.'.join(path) or '<root>'} must be a mapping",
            src,
            lines.get(path),
        )
    for key, value in data.items():
        p = path + (str(key),)
        if key not in schema:
            raise ConfigError(f"unknown key '{'.'.join(p)}'", src, lines.get(p))
        expected = schema[key]
        if isinstance(expected, dict) and expected and all(isinstance(v, (dict, type, tuple)) for v in expected.values()):
            if expected is not dict:
                _validate(value, expected, lines, src, p)
        elif expected is dict:
            if not isinstance(value, dict):
                raise ConfigError(f"'{'.'.join(p)}' must be a mapping", src, lines.get(p))
        elif not isinstance(value, expected) or isinstance(value, bool):
            name = expected.__name__ if isinstance(expected, type) else "number"
            raise ConfigError(f"'{'.'.join(p)}' must be a {name}", src, lines.get(p))


def load_config(path, command):
    src = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    lines = _line_map(text)
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    _validate(data, _SCHEMAS[command], lines, src)
    return data, lines, src, hashlib.sha256(text.encode()).hexdigest()[:16]


def _require(data, lines, src, *path):
    node = data
    for i, key in enumerate(path):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(
                f"missing required key '{'.'.join(path)}'", src, lines.get(tuple(path[:i]))
            )
        node = node[key]
    return node


def _build_channel(spec, lines, src, path):
    gains = spec.get("gains")
    if gains is None:
        raise ConfigError(f"missing '{'.'.join(path)}.gains'", src, lines.get(path))
    if "pmf" in spec:
        pmf = [float(p) for p in spec["pmf"]]
    elif "pmf_weights" in spec:
        w = np.asarray(spec["pmf_weights"], dtype=float)
        pmf = list(w / w.sum())
    else:
        raise ConfigError(f"'{'.'.join(path)}' needs pmf or pmf_weights", src, lines.get(path))
    try:
        return ChannelModel(tuple(float(g) for g in gains), tuple(pmf))
    except ValidationError as exc:
        raise ConfigError(str(exc), src, lines.get(path)) from exc


def _build_costs(spec, channel, lines, src, path):
    if "update_per_gain" in spec:
        c_u = tuple(float(c) for c in spec["update_per_gain"])
    elif "update_scale_over_gain" in spec:
        scale = float(spec["update_scale_over_gain"])
        c_u = tuple(scale / g for g in channel.gains)
    else:
        raise ConfigError(
            f"'{'.'.join(path)}' needs update_per_gain or update_scale_over_gain",
            src,
            lines.get(path),
        )
    try:
        return CostModel(float(spec.get("sampling", 0.0)), c_u, float(spec.get("budget", 0.0)))
    except ValidationError as exc:
        raise ConfigError(str(exc), src, lines.get(path)) from exc


def build_instance(data, lines, src):
    spec = _require(data, lines, src, "instance")
    channel = _build_channel(
        _require(data, lines, src, "instance", "channel"), lines, src, ("instance", "channel")
    )
    costs = _build_costs(
        _require(data, lines, src, "instance", "costs"), channel, lines, src, ("instance", "costs")
    )
    try:
        return ProblemInstance(
            _require(data, lines, src, "instance", "cap_l"),
            _require(data, lines, src, "instance", "cap_r"),
            channel,
            costs,
        )
    except ValidationError as exc:
        raise ConfigError(str(exc), src, lines.get(("instance",))) from exc


# ---------------------------------------------------------------------------
# commands

def _provenance(config_hash, seed):
    return f"provenance config_sha256={config_hash} seed={seed} version={__version__}"


def cmd_solve_single(data, lines, src, config_hash, outdir, seed, threads):
    instance = build_instance(data, lines, src)
    solver = data.get("solver", {})
    method = solver.get("method", "robbins-monro")
    eta = float(solver.get("eta", 1e-3))
    max_steps = int(solver.get("max_steps", 5000))
    prov = _provenance(config_hash, seed)

    sol = solve_cmdp(instance, method=method, eta=eta, max_steps=max_steps)
    vt = relative_value_iteration(instance, sol.lambda_star)
    outdir.mkdir(parents=True, exist_ok=True)
    vt.to_csv(outdir / "value_table.csv", prov)
    sol.mixture.pi_1.to_csv(outdir / "policy_lambda1.csv", prov)
    sol.mixture.pi_2.to_csv(outdir / "policy_lambda2.csv", prov)
    sol.mixture.to_csv(outdir / "mixture.csv", sol.metrics_1, sol.metrics_2, prov)
    if sol.robbins_monro is not None:
        sol.robbins_monro.trace_to_csv(outdir / "lambda_trace.csv", prov)
    log.info(
        "lambda*=%.6g alpha=%.4f aoi=%.6g energy=%.6g",
        sol.lambda_star,
        sol.mixture.alpha,
        sol.metrics.avg_aoi,
        sol.metrics.avg_energy,
    )

    budgets = data.get("sweep", {}).get("budgets")
    if budgets:
        def one(budget):
            inst = dataclasses.replace(
                instance, costs=dataclasses.replace(instance.costs, c_max=float(budget))
            )
            s = solve_cmdp(inst, method="bisection", eta=eta)
            return (budget, s.lambda_star, s.metrics.avg_aoi, s.metrics.avg_energy)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                rows = list(pool.map(one, budgets))
        else:
            rows = [one(b) for b in budgets]
        with open(outdir / "aoi_vs_budget.csv", "w", newline="") as f:
            f.write(f"# {prov}\n")
            w = csv.writer(f)
            w.writerow(["budget", "lambda_star", "avg_aoi", "avg_energy"])
            for b, lam, aoi, en in rows:
                w.writerow([repr(float(b)), repr(lam), repr(aoi), repr(en)])
    return 0


def cmd_structure(data, lines, src, config_hash, outdir, seed, threads):
    instance = build_instance(data, lines, src)
    spec = data.get("structure", {})
    lambda_grid = [float(x) for x in spec.get("lambda_grid", [0.01, 0.1, 1.0])]
    prov = _provenance(config_hash, seed)
    outdir.mkdir(parents=True, exist_ok=True)

    rows = []
    all_ok = True
    for lam in lambda_grid:
        vt = relative_value_iteration(instance, lam)
        mono = certify_value_monotonicity(vt)
        lemma = certify_dominance_monotonicity(instance, vt)
        policy, _ = structure_aware_policy_iteration(instance, lam)
        cert = certify_threshold_structure(instance, policy, vt)
        upset_ok, upset_viols = channel_upset_report(instance, policy)
        rows += [
            (lam, "value-monotone", mono.passed, len(mono.violations)),
            (lam, "dominance-monotone", lemma.passed, len(lemma.violations)),
            (lam, "idle-region", cert.idle_ok, 0),
            (lam, "update-threshold", cert.update_ok, 0),
            (lam, "sample-threshold", cert.sample_ok, 0),
            (lam, "sample+update-threshold", cert.sample_update_ok, 0),
            (lam, "growth-implications", cert.implications_ok, len(cert.violations)),
            (lam, "channel-upset", upset_ok, len(upset_viols)),
        ]
        all_ok &= mono.passed and lemma.passed and cert.all_ok and upset_ok
        tag = repr(lam).replace(".", "p")
        policy.to_csv(outdir / f"region_map_lambda_{tag}.csv", prov)

    if "sampling_cost_grid" in spec:
        h = instance.channel.index_of(float(spec.get("sampling_gain", instance.channel.gains[0])))
        rep = threshold_monotonicity_sweep(
            instance, [float(c) for c in spec["sampling_cost_grid"]], "sampling", h,
            float(spec.get("lambda_grid", [0.1])[0]) if "lambda_grid" in spec else 0.1,
        )
        rep.to_csv(outdir / "sweep_sampling_cost.csv", prov)
        rows.append(("-", "sampling-threshold-monotone", rep.monotone, len(rep.violations)))
        all_ok &= rep.monotone
    if "updating_cost_grid" in spec:
        h = instance.channel.index_of(float(spec.get("updating_gain", instance.channel.gains[0])))
        rep = threshold_monotonicity_sweep(
            instance, [float(c) for c in spec["updating_cost_grid"]], "updating", h,
            float(spec.get("lambda_grid", [0.1])[0]) if "lambda_grid" in spec else 0.1,
        )
        rep.to_csv(outdir / "sweep_updating_cost.csv", prov)
        rows.append(("-", "updating-threshold-monotone", rep.monotone, len(rep.violations)))
        all_ok &= rep.monotone

    out_rows = [(0.0 if r[0] == "-" else r[0], r[1], r[2], r[3]) for r in rows]
    write_certification_csv(outdir / "certification.csv", out_rows, prov)
    if not all_ok:
        raise CertificationFailure("structural certification failed; see certification.csv")
    return 0


def cmd_dominance(data, lines, src, config_hash, outdir, seed, threads):
    instance = build_instance(data, lines, src)
    spec = _require(data, lines, src, "dominance")
    budget = float(spec.get("budget", instance.costs.c_max))
    dists = {}
    for name, d in _require(data, lines, src, "dominance", "distributions").items():
        dists[name] = _build_channel(d, lines, src, ("dominance", "distributions", name))
    pairs = _require(data, lines, src, "dominance", "pairs")
    prov = _provenance(config_hash, seed)
    outdir.mkdir(parents=True, exist_ok=True)

    def one(pair):
        name_i, name_j = pair
        res = compare_optimal_aoi(instance, dists[name_i], dists[name_j], budget)
        return (
            f"{name_i}-vs-{name_j}",
            repr(dists[name_i].mean_gain()),
            repr(dists[name_j].mean_gain()),
            repr(res.aoi_i),
            repr(res.aoi_j),
            res.verdict.relation,
            res.verdict.direction,
            int(res.asserted),
            "" if res.holds is None else int(res.holds),
        )

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    write_comparison_csv(outdir / "dominance.csv", rows, prov)
    if any(r[7] == 1 and r[8] == 0 for r in rows):
        raise CertificationFailure("a dominance-ordered pair violated the AoI ordering")
    return 0


def build_fleet(data, lines, src, seed):
    spec = _require(data, lines, src, "fleet")
    k = int(spec.get("devices", 1))
    channel = _build_channel(
        _require(data, lines, src, "fleet", "channel"), lines, src, ("fleet", "channel")
    )
    costs_spec = _require(data, lines, src, "fleet", "costs")
    s_lo, s_hi = costs_spec.get("sampling_range", [0.2, 0.3])
    u_lo, u_hi = costs_spec.get("update_scale_range", [0.2, 0.3])
    budget = float(costs_spec.get("budget", 0.3))
    gen = substream(seed, "costs")
    devices = []
    draws = []
    for i in range(k):
        c_s = float(s_lo + (s_hi - s_lo) * gen.random())
        scale = float(u_lo + (u_hi - u_lo) * gen.random())
        c_u = tuple(scale / g for g in channel.gains)
        devices.append(
            ProblemInstance(
                int(spec["cap_l"]), int(spec["cap_r"]), channel, CostModel(c_s, c_u, budget)
            )
        )
        draws.append((i, c_s, scale, budget))
    return FleetInstance(tuple(devices)), draws


def _write_fleet_summary(path, result, prov):
    with open(path, "w", newline="") as f:
        f.write(f"# {prov}\n")
        w = csv.writer(f)
        w.writerow(["device_id", "avg_aoi", "se_aoi", "avg_energy", "se_energy", "constraint_slack"])
        m = result.metrics
        for i in range(len(m.avg_aoi)):
            w.writerow(
                [
                    i,
                    repr(float(m.avg_aoi[i])),
                    repr(float(m.se_aoi[i])),
                    repr(float(m.avg_energy[i])),
                    repr(float(m.se_energy[i])),
                    repr(float(result.lambdas[i])),
                ]
            )


def cmd_fleet(data, lines, src, config_hash, outdir, seed, threads):
    sim_spec = data.get("sim", {})
    run_seed = seed if seed is not None else int(sim_spec.get("seed", 0))
    fleet, draws = build_fleet(data, lines, src, run_seed)
    sched_spec = data.get("schedule", {})
    try:
        schedule = LearningSchedule(
            q_exponent=float(sched_spec.get("q_exponent", 0.6)),
            explore_coef=float(sched_spec.get("explore_coef", 0.5)),
            explore_decay=float(sched_spec.get("explore_decay", 0.3)),
            lambda_init=float(sched_spec.get("lambda_init", 1.0)),
            reference_mode=sched_spec.get("reference_mode", "cached"),
        )
    except ValidationError as exc:
        raise ConfigError(str(exc), src, lines.get(("schedule",))) from exc
    horizon = int(sim_spec.get("horizon", 100_000))
    burn = int(horizon * float(sim_spec.get("burn_in_fraction", 0.2)))
    window = int(sim_spec.get("window", 1000))
    trace_every = int(sim_spec.get("trace_every", 0))
    config = SimConfig(horizon=horizon, seed=run_seed, burn_in=burn)
    controllers = data.get("controllers", ["learned", "zero-wait"])
    prov = _provenance(config_hash, run_seed)
    outdir.mkdir(parents=True, exist_ok=True)

    with open(outdir / "fleet_costs.csv", "w", newline="") as f:
        f.write(f"# {prov}\n")
        w = csv.writer(f)
        w.writerow(["device_id", "sampling_cost", "update_scale", "budget"])
        for row in draws:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    comparison = []
    for controller in controllers:
        result = run_fleet(
            fleet, controller, schedule, config, trace_every=trace_every, window=window
        )
        tag = controller.replace("-", "_")
        _write_fleet_summary(outdir / f"summary_{tag}.csv", result, prov)
        with open(outdir / f"convergence_{tag}.csv", "w", newline="") as f:
            f.write(f"# {prov}\n")
            w = csv.writer(f)
            w.writerow(["window_end", "max_dq", "max_dlambda", "window_aoi", "window_energy"])
            for row in result.convergence:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        if trace_every:
            with open(outdir / f"trace_{tag}.csv", "w", newline="") as f:
                f.write(f"# {prov}\n")
                w = csv.writer(f)
                w.writerow(["slot", "device", "a_l", "a_r", "h_index", "s", "u", "energy", "lambda"])
                for row in result.trace:
                    w.writerow(list(row[:7]) + [repr(float(row[7])), repr(float(row[8]))])
        comparison.append(
            (
                controller,
                repr(float(np.mean(result.metrics.avg_aoi))),
                repr(float(np.mean(result.metrics.avg_energy))),
                result.converged_at if result.converged_at is not None else "",
            )
        )
        log.info(
            "%s: mean aoi %.4f mean energy %.4f converged_at=%s",
            controller,
            float(np.mean(result.metrics.avg_aoi)),
            float(np.mean(result.metrics.avg_energy)),
            result.converged_at,
        )
    with open(outdir / "comparison.csv", "w", newline="") as f:
        f.write(f"# {prov}\n")
        w = csv.writer(f)
        w.writerow(["controller", "mean_aoi", "mean_energy", "converged_at"])
        for row in comparison:
            w.writerow(row)
    return 0


_COMMANDS = {
    "solve-single": cmd_solve_single,
    "structure": cmd_structure,
    "dominance": cmd_dominance,
    "fleet": cmd_fleet,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="aoisched",
        description="Energy-constrained status sampling/updating schedulers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file (YAML)")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s"
    )
    try:
        data, lines, src, config_hash = load_config(args.config, args.command)
        outdir = Path(args.out) if args.out else Path(data.get("output", {}).get("dir", "out"))
        seed = args.seed if args.seed is not None else data.get("seed", data.get("sim", {}).get("seed", 0))
        return _COMMANDS[args.command](data, lines, src, config_hash, outdir, seed, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CertificationFailure as exc:
        print(f"certification failure: {exc}", file=sys.stderr)
        return 3
    except (SolverError, ValidationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
