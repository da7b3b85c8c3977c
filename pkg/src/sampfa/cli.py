"""Command-line entry point: configuration plus pipeline orchestration."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .angles import SingularBranchError, bfs_par
from .evaluation import Thresholds, accuracy, sample_errors, warmstart_bench
from .grid import GridError, graph_stats, load_case, network_to_dict
from .ieee39 import ieee39
from .losses import StageSchedule
from .lts import (DatasetSpec, SliceRejected, generate_dataset, load_dataset,
                  record_to_sample)
from .lts import slice as lts_slice
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .newton import (NonConvergenceError, PowerFlowSolution,
                     SingularJacobianError, SolverOptions, solve)
from .train import predict_sample, prepare_samples, train

log = logging.getLogger("sampfa")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class ConfigError(Exception):
    pass


_DEFAULTS = {
    "paths": {"case": None, "dataset": None, "checkpoint": None, "out": None},
    "seed": 0,
    "workers": 0,               # 0 = available parallelism
    "dataset": {"sizes": list(range(25, 40)), "samples_per_size": 10,
                "perturbation": 0.20, "max_outages": 2},
    "model": {"n_max": 48, "d_d": 64, "m_layers": 3, "k_heads": 4,
              "gat_heads": 2, "ffn_width": 128},
    "schedule": {"stage1_epochs": 50, "stage2_epochs": 150},
    "train": {"lr": 1e-3, "batch_size": 16},
    "newton": {"tol": 1e-8, "max_iterations": 200},
    "thresholds": {"mu_v": 0.01, "mu_sl": 10.0, "mu_ds": 10.0},
}

_FLAG_MAP = {
    "case": ("paths", "case"),
    "dataset": ("paths", "dataset"),
    "checkpoint": ("paths", "checkpoint"),
    "out": ("paths", "out"),
    "seed": ("seed",),
    "workers": ("workers",),
    "nmax": ("model", "n_max"),
    "epochs_stage1": ("schedule", "stage1_epochs"),
    "epochs_stage2": ("schedule", "stage2_epochs"),
    "lr": ("train", "lr"),
    "tol": ("newton", "tol"),
    "max_iter": ("newton", "max_iterations"),
    "mu_v": ("thresholds", "mu_v"),
    "mu_sl": ("thresholds", "mu_sl"),
    "mu_ds": ("thresholds", "mu_ds"),
}


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- command-line flags."""
    cfg = json.loads(json.dumps(_DEFAULTS))    # deep copy
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {args.config}: expected a JSON object")
        _deep_update(cfg, doc)
    for flag, path in _FLAG_MAP.items():
        val = getattr(args, flag, None)
        if val is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = val
    return cfg


def _print_resolved(command: str, cfg: dict) -> None:
    print(json.dumps({"command": command, "seed": cfg["seed"], "config": cfg},
                     sort_keys=True))


def _load_net(cfg: dict):
    path = cfg["paths"]["case"]
    if path is None or path == "ieee39":
        return ieee39()
    return load_case(path)


def _solver_options(cfg: dict) -> SolverOptions:
    return SolverOptions(tol=cfg["newton"]["tol"],
                         max_iterations=cfg["newton"]["max_iterations"])


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _workers(cfg: dict) -> int:
    w = int(cfg["workers"])
    return w if w > 0 else (os.cpu_count() or 1)


# --- subcommands ---------------------------------------------------------------

def cmd_solve(cfg: dict) -> int:
    net = _load_net(cfg)
    sol, rep = solve(net, opts=_solver_options(cfg))
    doc = {"solution": sol.to_dict(),
           "report": {"converged": rep.converged, "iterations": rep.iterations,
                      "max_mismatch": rep.max_mismatch,
                      "pv_to_pq_switches": rep.pv_to_pq_switches,
                      "wall_time": rep.wall_time}}
    _write_json(cfg["paths"]["out"], doc)
    if not rep.converged:
        print("solve: did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_stats(cfg: dict) -> int:
    net = _load_net(cfg)
    st = graph_stats(net)
    out = cfg["paths"]["out"]
    rows = [["case", "n", "branches", "avg_degree", "algebraic_connectivity",
             "connected"],
            [cfg["paths"]["case"] or "ieee39", net.n,
             len(list(net.live_branches())), st["avg_degree"],
             st["algebraic_connectivity"], int(st["connected"])]]
    if out is None:
        for r in rows:
            print(",".join(str(c) for c in r))
    else:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


def cmd_slice(cfg: dict) -> int:
    net = _load_net(cfg)
    sol, rep = solve(net, opts=_solver_options(cfg))
    if not rep.converged:
        print("slice: parent case did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    rng = np.random.default_rng(cfg["seed"])
    target = cfg["model"]["n_max"] if cfg["model"]["n_max"] < net.n else net.n
    start = int(rng.integers(net.n))
    sub = lts_slice(net, sol, start, target, rng)
    doc = {"network": network_to_dict(sub.sub_network),
           "solution": sub.solution.to_dict(),
           "bus_map": sub.bus_map, "provenance": sub.provenance}
    _write_json(cfg["paths"]["out"], doc)
    return EXIT_OK


def cmd_dataset(cfg: dict) -> int:
    out = cfg["paths"]["out"]
    if out is None:
        print("dataset: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    net = _load_net(cfg)
    sol, rep = solve(net, opts=_solver_options(cfg))
    if not rep.converged:
        print("dataset: parent case did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    d = cfg["dataset"]
    spec = DatasetSpec(sizes=list(d["sizes"]), samples_per_size=d["samples_per_size"],
                       perturbation=d["perturbation"], max_outages=d["max_outages"],
                       seed=cfg["seed"])
    report = generate_dataset([(net, sol)], spec, out, workers=_workers(cfg))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def cmd_train(cfg: dict) -> int:
    ds_path = cfg["paths"]["dataset"]
    ckpt = cfg["paths"]["checkpoint"]
    if ds_path is None or ckpt is None:
        print("train: --dataset and --checkpoint are required", file=sys.stderr)
        return EXIT_CONFIG
    mc = _model_config(cfg)
    samples = prepare_samples(load_dataset(ds_path), mc.n_max)
    schedule = StageSchedule(stage1_epochs=cfg["schedule"]["stage1_epochs"],
                             stage2_epochs=cfg["schedule"]["stage2_epochs"])
    log_path = cfg["paths"]["out"] or (ckpt + ".log.csv")
    result = train(samples, mc, schedule, seed=cfg["seed"],
                   lr=cfg["train"]["lr"], batch_size=cfg["train"]["batch_size"],
                   log_path=log_path,
                   progress=lambda row: log.info(
                       "epoch %d stage %d total %.6g", row["epoch"], row["stage"],
                       row["total"]))
    if result.history and not np.isfinite(result.history[-1]["total"]):
        print("train: non-finite training loss", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, result.params, mc, result.norm)
    print(json.dumps({"checkpoint": ckpt, "log": log_path,
                      "epochs": len(result.history),
                      "final_total": result.history[-1]["total"]
                      if result.history else None}))
    return EXIT_OK


def _predictions(cfg: dict):
    """(records, samples, per-sample ModelOutput) for dataset + checkpoint."""
    ds_path = cfg["paths"]["dataset"]
    ckpt = cfg["paths"]["checkpoint"]
    if ds_path is None or ckpt is None:
        raise ConfigError("--dataset and --checkpoint are required")
    params, mc, norm = load_checkpoint(ckpt)
    records = load_dataset(ds_path)
    samples = prepare_samples(records, mc.n_max)
    outs = [predict_sample(s, params, mc, norm) for s in samples]
    return records, samples, outs


def cmd_infer(cfg: dict) -> int:
    _, _, outs = _predictions(cfg)
    doc = [{"x_out": o.x_out.tolist(), "h_out": o.h_out.tolist()} for o in outs]
    _write_json(cfg["paths"]["out"], doc)
    return EXIT_OK


def cmd_recover(cfg: dict) -> int:
    sol_path = cfg["paths"]["dataset"] or cfg["paths"]["checkpoint"]
    net = _load_net(cfg)
    if sol_path is None:
        print("recover: a solution JSON is required (--dataset)", file=sys.stderr)
        return EXIT_CONFIG
    with open(sol_path) as fh:
        doc = json.load(fh)
    sol_doc = doc.get("solution", doc)
    v = np.asarray(sol_doc["v"], float)
    sb = np.array([complex(a, b) for a, b in sol_doc["s_branch"]], dtype=complex)
    slack = net.slack_index
    slack_angle = float(sol_doc.get("theta", [0.0] * net.n)[slack])
    try:
        asn = bfs_par(net, v, sb, slack, slack_angle)
    except SingularBranchError as exc:
        print(f"recover: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_json(cfg["paths"]["out"],
                {"theta": asn.theta.tolist(), "slack": asn.slack,
                 "slack_angle": asn.slack_angle,
                 "cycle_residual": asn.cycle_residual,
                 "unassigned": asn.unassigned})
    return EXIT_OK


def recovered_angles(sample, out):
    """BFS angle recovery from predicted voltages and flows; truth slack angle."""
    net = sample.net
    flows = out.h_out[:, 0] + 1j * out.h_out[:, 1]
    slack = net.slack_index
    return bfs_par(net, out.x_out[:, 2], flows, slack,
                   float(sample.theta[slack])).theta


def cmd_eval(cfg: dict) -> int:
    records, samples, outs = _predictions(cfg)
    thr = Thresholds(**cfg["thresholds"])
    errors = []
    rows = []
    for rec, s, o in zip(records, samples, outs):
        truth = PowerFlowSolution(
            v=s.bus_target[:, 2], theta=s.theta, p=s.bus_target[:, 0],
            q=s.bus_target[:, 1],
            s_branch=s.branch_target[:, 0] + 1j * s.branch_target[:, 1])
        try:
            theta = recovered_angles(s, o)
        except SingularBranchError:
            theta = None
        e = sample_errors(o.x_out, o.h_out, truth, s.net, pred_theta=theta)
        errors.append(e)
        rows.append([rec["provenance"].get("sample_index"), e.e_v, e.e_theta,
                     e.e_sl, e.e_ds])
    report = {
        "samples": len(errors),
        "acc": accuracy(errors, thr),
        "mean_e_v": float(np.mean([e.e_v for e in errors])),
        "mean_e_theta": float(np.mean([e.e_theta for e in errors
                                       if e.e_theta is not None]))
        if any(e.e_theta is not None for e in errors) else None,
        "mean_e_sl": float(np.mean([e.e_sl for e in errors])),
        "mean_e_ds": float(np.mean([e.e_ds for e in errors])),
        "thresholds": cfg["thresholds"],
    }
    _write_json(cfg["paths"]["out"], report)
    if cfg["paths"]["out"]:
        with open(cfg["paths"]["out"] + ".samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "e_v", "e_theta", "e_sl", "e_ds"])
            w.writerows(rows)
    return EXIT_OK


def cmd_warmstart_bench(cfg: dict) -> int:
    records, samples, outs = _predictions(cfg)
    cases = [s.net for s in samples]
    inits = []
    for s, o in zip(samples, outs):
        try:
            theta = recovered_angles(s, o)
        except SingularBranchError:
            theta = np.zeros(s.net.n)
        inits.append((o.x_out[:, 2].copy(), theta))
    bench = warmstart_bench(cases, inits, opts=_solver_options(cfg))
    _write_json(cfg["paths"]["out"], bench)
    return EXIT_OK


_COMMANDS = {
    "solve": cmd_solve,
    "stats": cmd_stats,
    "slice": cmd_slice,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "infer": cmd_infer,
    "recover": cmd_recover,
    "eval": cmd_eval,
    "warmstart-bench": cmd_warmstart_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--case", help="case file path (default: built-in 39-bus)")
    common.add_argument("--dataset", help="JSONL dataset path")
    common.add_argument("--checkpoint", help="model checkpoint path")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--nmax", type=int)
    common.add_argument("--epochs-stage1", type=int, dest="epochs_stage1")
    common.add_argument("--epochs-stage2", type=int, dest="epochs_stage2")
    common.add_argument("--lr", type=float)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int, dest="max_iter")
    common.add_argument("--mu-v", type=float, dest="mu_v")
    common.add_argument("--mu-sl", type=float, dest="mu_sl")
    common.add_argument("--mu-ds", type=float, dest="mu_ds")

    parser = argparse.ArgumentParser(prog="sampfa",
                                     description="power flow analysis toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SAMPFA_LOG", "WARNING").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; those are config errors here
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"sampfa: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_resolved(args.command, cfg)
    try:
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"sampfa: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GridError, SliceRejected, OSError, json.JSONDecodeError,
            KeyError, ValueError) as exc:
        print(f"sampfa: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, SingularJacobianError,
            SingularBranchError) as exc:
        print(f"sampfa: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
