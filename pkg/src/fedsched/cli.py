"""Command-line entry point: fedsched <predict|schedule|optimize|simulate|sweep>.

Every run writes long-format CSVs plus manifest.json into --out. Passing a manifest back
as --config replays the run (same config, seed, replicas and policy) bit-identically.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .compute import closed_form_unit_compute_cost
from .convergence import TrainingConstants, UnboundedLocalEpochs, optimal_local_epochs, predict_global_epochs
from .core import ConfigError, FleetSpec, RngStream, generate_fleet, parse_config, read_document, sample_participants
from .hyperopt import (UnitCosts, grid_search_hyperparams, joint_cost, optimal_hyperparams, optimal_participation,
                       round_cost)
from .scheduler import (POLICIES, UnboundedFrequency, fleet_reference_frequency, kkt_residuals, make_schedule,
                        schedule_round)
from .sim import (NOT_REACHED, SimSettings, SimulationDiverged, compare_policies, make_synthetic_task,
                  measure_G_epsilon, run_training)
from .wireless import unit_upload_cost

logger = logging.getLogger("fedsched")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("predict", "schedule", "optimize", "simulate", "sweep")
SWEEP_AXES = ("K", "E_l", "gamma", "cost_ratio", "Var")
DEFAULT_MAX_EPOCHS = 150

# stream ids, so each use of the run seed draws from its own independent stream
STREAM_FLEET, STREAM_TASK, STREAM_TRAIN, STREAM_SELECT, STREAM_SWEEP = 1, 2, 3, 4, 5


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers


def thread_cap() -> int:
    raw = os.environ.get("FEDSCHED_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("FEDSCHED_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("FEDSCHED_THREADS", "must be >= 1")
    return n


def fan_out(fn, jobs: list) -> list:
    """Ordered map over jobs, in a process pool when FEDSCHED_THREADS > 1."""
    workers = min(thread_cap(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _section(doc: dict, name: str, allowed: set) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a table")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(name, f"unknown keys {sorted(unknown)}")
    return sec


def _as_list(value, name: str, cast=float) -> list:
    vals = value if isinstance(value, list) else [value]
    if not vals:
        raise ConfigError(name, "empty list")
    try:
        return [cast(v) for v in vals]
    except (TypeError, ValueError):
        raise ConfigError(name, f"bad value {value!r}") from None


def _constants(doc: dict) -> TrainingConstants:
    if "constants" not in doc:
        raise ConfigError("constants", "missing section (or pass --constants)")
    sec = _section(doc, "constants", {f.name for f in fields(TrainingConstants)})
    try:
        return TrainingConstants(**{k: float(v) for k, v in sec.items()})
    except TypeError as exc:
        raise ConfigError("constants", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("constants", str(exc)) from None


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def fleet_policy_shares(policy: str):
    def shares(sel, fleet, config):
        return make_schedule(policy, sel, 1, fleet, config).shares
    return shares


def unit_costs_for(fleet, config, sec: dict, policy: str) -> UnitCosts:
    """C_u,0 from the fleet at full participation, C_n,0 from the closed form (overridable)."""
    up = sec.get("upload_cost")
    comp = sec.get("compute_cost")
    if up is None:
        up = unit_upload_cost(fleet, config, fleet_policy_shares(policy))
    if comp is None:
        try:
            fbar = fleet_reference_frequency(fleet, config)
        except UnboundedFrequency:
            fbar = float(np.mean(fleet.f_max))
        fbar = float(np.clip(fbar, fleet.f_min.min(), fleet.f_max.max()))
        comp = closed_form_unit_compute_cost(fleet.mean_data_size, fleet.mean_chip_coeff, fbar, config)
    return UnitCosts(float(up), float(comp), config.broadcast_time_s)


# --------------------------------------------------------------------------- subcommands
# each returns {output name: (header, rows)} and may raise NumericalFailure after the
# outputs are assembled (the caller still writes them)


def cmd_predict(doc, config, fleet, args):
    sec = _section(doc, "predict", {"K", "E_l", "gamma", "eps", "D"})
    c = _constants(doc)
    ks = _as_list(sec.get("K", [1, 2, 5, 10, 20, 50]), "predict.K", int)
    es = _as_list(sec.get("E_l", [1, 2, 5, 10, 20, 50]), "predict.E_l", int)
    gs = _as_list(sec.get("gamma", [0.0]), "predict.gamma")
    eps = float(sec.get("eps", 1.0))
    d = float(sec.get("D", fleet.mean_data_size))
    rows = []
    for k in ks:
        for e in es:
            for g in gs:
                val = predict_global_epochs(c, eps, k, e, g, d)
                rows.append((k, e, g, eps, d, val, math.ceil(val)))
    return {"predict.csv": (("K", "E_l", "gamma", "eps", "D", "G_eps", "G_eps_int"), rows)}, {}


def cmd_schedule(doc, config, fleet, args):
    sec = _section(doc, "schedule", {"selected", "K", "E_l", "rounds", "sampling"})
    policy = args.policy or "distributed"
    local_epochs = int(sec.get("E_l", 1))
    rounds = int(sec.get("rounds", 1))
    if rounds < 1 or local_epochs < 1:
        raise ConfigError("schedule", "rounds and E_l must be >= 1")
    base = RngStream(args.seed, STREAM_SELECT)
    sched_rows, report = [], []
    failed = False
    for r in range(rounds):
        if "selected" in sec:
            sel = np.asarray(_as_list(sec["selected"], "schedule.selected", int))
            if np.any(sel < 0) or np.any(sel >= len(fleet)):
                raise ConfigError("schedule.selected", "client id out of range")
        else:
            sel = sample_participants(base.spawn(r), fleet.weight, int(sec.get("K", len(fleet))),
                                      sec.get("sampling", "by_weight"))
        s = make_schedule(policy, sel, local_epochs, fleet, config, round_id=r + 1)
        kkt = kkt_residuals(s, fleet, config)
        sched_rows.extend(s.rows())
        report.append((r + 1, policy, s.k, s.round_cost, s.coupled_objective, s.finish_time,
                       float(np.max(np.abs(kkt.stationarity_a))), kkt.max_interior, bool(s.clamped.any()),
                       s.converged))
        failed |= not s.converged
    outputs = {
        "schedule.csv": (("round", "client", "a_j", "f_j", "t_u", "t_n", "e_u", "e_n"), sched_rows),
        "kkt.csv": (("round", "policy", "K", "round_cost", "coupled_objective", "finish_time",
                     "kkt_shares", "kkt_max_interior", "any_clamped", "converged"), report),
    }
    return outputs, {"failed": "centralized solver did not converge" if failed else None}


def cmd_optimize(doc, config, fleet, args):
    sec = _section(doc, "optimize", {"eps", "gamma", "E_max", "K_grid", "E_grid", "upload_cost", "compute_cost"})
    c = _constants(doc)
    eps = float(sec.get("eps", 1.0))
    gamma = float(sec.get("gamma", 0.0))
    e_max = int(sec.get("E_max", 100))
    n = len(fleet)
    d = fleet.mean_data_size
    costs = unit_costs_for(fleet, config, sec, args.policy or "distributed")
    hp = optimal_hyperparams(c, costs, d, gamma, n, e_max, eps)
    ks = _as_list(sec.get("K_grid", list(range(1, n + 1))), "optimize.K_grid", int)
    es = _as_list(sec.get("E_grid", list(range(1, e_max + 1))), "optimize.E_grid", int)
    surface = grid_search_hyperparams(c, costs, ks, es, eps, gamma, d)
    gk, ge = surface.argmin
    rec = [(hp.k, hp.local_epochs, hp.k_real, hp.local_epochs_real, hp.rho0, costs.upload, costs.compute,
            costs.broadcast, joint_cost(hp.k, hp.local_epochs, costs, c, eps, gamma, d), gk, ge,
            float(surface.total.min()), hp.advisory)]
    return {
        "recommendation.csv": (("K", "E_l", "K_real", "E_l_real", "rho0", "C_u0", "C_n0", "T_d", "joint_cost",
                                "grid_K", "grid_E_l", "grid_joint_cost", "advisory"), rec),
        "surface.csv": (("K", "E_l", "G_eps", "C_g", "total"), list(surface.rows())),
    }, {}


_TASK_KEYS = {"skew", "dim", "label_noise", "optimum_spread", "curvature_spread", "optimum_scale"}
_SIM_KEYS = {"K", "E_l", "gamma", "eps", "max_epochs", "sampling", "aggregation", "loss_mode", "batch_fraction",
             "full_batch", "lr_safety", "burn_in", "costs", "task"}


def _sim_settings(sec: dict, policy: str | None, **over) -> SimSettings:
    vals = {
        "k": int(sec.get("K", 10)), "local_epochs": int(sec.get("E_l", 5)), "gamma": float(sec.get("gamma", 0.0)),
        "sampling": sec.get("sampling", "by_weight"), "aggregation": sec.get("aggregation", "sampled"),
        "loss_mode": sec.get("loss_mode", "bernoulli"), "batch_fraction": float(sec.get("batch_fraction", 0.1)),
        "full_batch": bool(sec.get("full_batch", False)), "max_epochs": int(sec.get("max_epochs", DEFAULT_MAX_EPOCHS)),
        "eps": float(sec.get("eps", 0.02)), "lr_safety": float(sec.get("lr_safety", 1.0)),
        "burn_in": int(sec.get("burn_in", 5)), "policy": policy if sec.get("costs", True) else None,
    }
    vals.update(over)
    try:
        return SimSettings(**vals)
    except ValueError as exc:
        raise ConfigError("simulate", str(exc)) from None


def _task_params(sec: dict) -> dict:
    task = sec.get("task", {})
    unknown = set(task) - _TASK_KEYS
    if unknown:
        raise ConfigError("simulate.task", f"unknown keys {sorted(unknown)}")
    return {k: float(v) if k != "dim" else int(v) for k, v in task.items()}


def _train_job(job):
    """One seed of training; top-level so process pools can pickle it."""
    task_params, sizes, task_seed, settings, seed, stream, config, fleet = job
    params = dict(task_params)
    skew = params.pop("skew", 0.5)
    task = make_synthetic_task(len(sizes), sizes, skew, RngStream(task_seed, STREAM_TASK), **params)
    trace = run_training(task, settings, RngStream(seed, stream), config if settings.policy else None,
                         fleet if settings.policy else None)
    return trace


def _training_jobs(doc, config, fleet, args, settings, replicas, stream_prefix=(STREAM_TRAIN,), task_over=None):
    sec = doc.get("simulate", {})
    params = _task_params(sec)
    params.update(task_over or {})
    sizes = np.round(fleet.data_size).astype(int)
    return [(params, sizes, args.seed, settings, args.seed, tuple(stream_prefix) + (i,), config, fleet)
            for i in range(replicas)]


def _run_jobs(jobs):
    try:
        return fan_out(_train_job, jobs)
    except ValueError as exc:
        raise ConfigError("simulate", str(exc)) from None


def cmd_simulate(doc, config, fleet, args):
    sec = _section(doc, "simulate", _SIM_KEYS)
    settings = _sim_settings(sec, args.policy or "distributed")
    replicas = args.replicas or 20
    jobs = _training_jobs(doc, config, fleet, args, settings, replicas)
    traces = _run_jobs(jobs)
    trace_rows, per_seed = [], []
    for i, tr in enumerate(traces):
        for row in tr.rows():
            trace_rows.append((i,) + tuple(row))
        g = measure_G_epsilon(tr, settings.eps)
        per_seed.append((i, g if g != NOT_REACHED else "", g != NOT_REACHED, tr.epochs, tr.loss_gap[-1],
                         tr.time_cost[-1], tr.energy_cost[-1], sum(tr.retransmissions)))
    reached = [r[1] for r in per_seed if r[2]]
    summary = [
        ("seeds", replicas), ("reached", len(reached)), ("not_reached", replicas - len(reached)),
        ("median_G_eps", float(np.median(reached)) if reached else ""),
        ("mean_time_cost", float(np.mean([r[5] for r in per_seed]))),
        ("mean_energy_cost", float(np.mean([r[6] for r in per_seed]))),
    ]
    return {
        "traces.csv": (("seed", "epoch", "loss_gap", "lambda_hat", "K_gamma", "time_cost", "energy_cost"),
                       trace_rows),
        "per_seed.csv": (("seed", "G_eps", "reached", "epochs", "final_gap", "time_cost", "energy_cost",
                          "retransmissions"), per_seed),
        "summary.csv": (("metric", "value"), summary),
    }, {"seeds": [[args.seed, STREAM_TRAIN, i] for i in range(replicas)]}


def _sweep_analytic(axis, values, doc, config, fleet, args, sec):
    c = _constants(doc)
    eps = float(sec.get("eps", 1.0))
    gamma = float(sec.get("gamma", 0.0))
    n = len(fleet)
    d = fleet.mean_data_size
    costs = unit_costs_for(fleet, config, sec, args.policy or "distributed")
    try:
        e_default = optimal_local_epochs(c)[1]
    except UnboundedLocalEpochs:
        e_default = int(sec.get("E_max", 100))
    k0 = int(sec.get("K", optimal_participation(c, e_default, d, gamma, costs, n, eps).k))
    e0 = int(sec.get("E_l", e_default))
    rows = []
    for vi, v in enumerate(values):
        if axis == "cost_ratio":
            comp = v * costs.upload - costs.broadcast / e0
            if comp <= 0:
                raise ConfigError("sweep.values", f"cost ratio {v} too small for T_d")
            cc = UnitCosts(costs.upload, comp, costs.broadcast)
            hp = optimal_participation(c, e0, d, gamma, cc, n, eps)
            rows.append((axis, v, 0, "K_star", hp.k))
            rows.append((axis, v, 0, "K_star_real", hp.k_real))
            continue
        if axis == "Var":
            fl = generate_fleet(FleetSpec(num_clients=n, var=v), config.fading,
                                RngStream(args.seed, (STREAM_SWEEP, vi)))
            cu = unit_costs_for(fl, config, sec, args.policy or "distributed")
            rows.append((axis, v, 0, "C_u0", cu.upload))
            rows.append((axis, v, 0, "C_n0", cu.compute))
            continue
        k, e, g = k0, e0, gamma
        if axis == "K":
            k = int(v)
        elif axis == "E_l":
            e = int(v)
        else:
            g = float(v)
        val = predict_global_epochs(c, eps, k, e, g, d)
        rows.append((axis, v, 0, "G_eps", val))
        rows.append((axis, v, 0, "C_g", round_cost(k, e, costs)))
        rows.append((axis, v, 0, "joint_cost", val * round_cost(k, e, costs)))
    return rows


def _sweep_simulated(axis, values, doc, config, fleet, args, sec):
    replicas = args.replicas or 20
    sim_sec = dict(doc.get("simulate", {}))
    rows = []
    if axis == "Var":
        epochs = int(sec.get("epochs", 50))
        k = int(sec.get("K", sim_sec.get("K", 10)))
        e = int(sec.get("E_l", sim_sec.get("E_l", 5)))
        policies = [args.policy or "distributed", "even"]
        for vi, v in enumerate(values):
            for r in range(replicas):
                stream = RngStream(args.seed, (STREAM_SWEEP, vi, r))
                fl = generate_fleet(FleetSpec(num_clients=len(fleet), var=v), config.fading, stream.spawn(0),
                                    random_gains=v > 0)
                cmp = compare_policies(fl, config, k, e, policies, stream.spawn(1), epochs, redraw_gains=v > 0)
                for p in policies:
                    rows.append((axis, v, r, f"mean_cost_{p}", cmp.mean(p)))
        return rows
    if axis == "cost_ratio":
        raise ConfigError("sweep.mode", "cost_ratio is an analytic axis")
    for vi, v in enumerate(values):
        over = {"k": int(v)} if axis == "K" else {"local_epochs": int(v)} if axis == "E_l" else {"gamma": float(v)}
        settings = _sim_settings(sim_sec, None, **over)
        jobs = _training_jobs(doc, config, fleet, args, settings, replicas, (STREAM_SWEEP, vi))
        for r, tr in enumerate(_run_jobs(jobs)):
            g = measure_G_epsilon(tr, settings.eps)
            rows.append((axis, v, r, "G_eps", g if g != NOT_REACHED else ""))
    return rows


def cmd_sweep(doc, config, fleet, args):
    sec = _section(doc, "sweep", {"axis", "values", "mode", "eps", "gamma", "K", "E_l", "E_max", "epochs",
                                  "upload_cost", "compute_cost"})
    axis = sec.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"must be one of {SWEEP_AXES}")
    mode = sec.get("mode", "analytic")
    if mode not in ("analytic", "simulated"):
        raise ConfigError("sweep.mode", "must be analytic or simulated")
    if "values" not in sec:
        raise ConfigError("sweep.values", "missing")
    values = _as_list(sec["values"], "sweep.values", int if axis in ("K", "E_l") else float)
    run = _sweep_analytic if mode == "analytic" else _sweep_simulated
    rows = run(axis, values, doc, config, fleet, args, sec)
    return {"sweep.csv": (("axis", "value", "replicate", "metric", "result"), rows)}, {}


HANDLERS = {"predict": cmd_predict, "schedule": cmd_schedule, "optimize": cmd_optimize,
            "simulate": cmd_simulate, "sweep": cmd_sweep}


# --------------------------------------------------------------------------- driver


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsched", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedsched {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML/JSON config, or a manifest.json to replay")
        sp.add_argument("--seed", type=int, default=None, help="u64 run seed (default 0)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--replicas", type=int, default=None)
        sp.add_argument("--policy", choices=POLICIES, default=None)
        sp.add_argument("--constants", default=None, help="JSON file with training constants")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> dict:
    """Load the config document; a manifest supplies its own config and run arguments."""
    doc = read_document(args.config)
    if doc.get("kind") == "fedsched-manifest":
        if doc.get("subcommand") != args.command:
            raise ConfigError("config", f"manifest is for {doc.get('subcommand')!r}, not {args.command!r}")
        for key in ("seed", "replicas", "policy"):
            if getattr(args, key) is None:
                setattr(args, key, doc.get(key))
        doc = copy.deepcopy(doc["config"])
    if args.constants:
        doc["constants"] = json.loads(Path(args.constants).read_text())
    if args.seed is None:
        args.seed = 0
    if not 0 <= args.seed < 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    if args.replicas is not None and args.replicas < 1:
        raise ConfigError("replicas", "must be >= 1")
    return doc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        doc = resolve(args)
        thread_cap()
        config, fleet = parse_config(doc, RngStream(args.seed, STREAM_FLEET))
        outputs, extra = HANDLERS[args.command](doc, config, fleet, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, NumericalFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, (header, rows) in outputs.items():
        write_csv(out / name, header, rows)
        hashes[name] = sha256(out / name)
    manifest = {
        "kind": "fedsched-manifest",
        "tool": "fedsched",
        "version": __version__,
        "subcommand": args.command,
        "seed": args.seed,
        "replicas": args.replicas,
        "policy": args.policy,
        "config": doc,
        "seeds": extra.get("seeds", [[args.seed]]),
        "outputs": sorted(outputs),
        "sha256": hashes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    if extra.get("failed"):
        print(f"numerical failure: {extra['failed']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
