"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration error, 2 verification failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from .estimation import covariance_schedule
from .lqr import riccati_backward
from .model import ModelError, ProcessModel, model_from_dict, model_to_dict
from .policies import ControlPolicy, PolicyError, make_trigger
from .sim import evaluate, run_batch, sweep_lambda
from .voidp import ExactModeError, GridSpec, backward_induction, extract_threshold, myopic_threshold, stage_values

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2, 64
COMMANDS = ("validate", "riccati", "dp", "simulate", "sweep", "verify")
DEFAULT_LAMBDAS = [round(0.05 + 0.1 * i, 2) for i in range(10)]
FLOAT_FMT = "%.17g"


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"config error in {field!r}: {message}")
        self.field = field


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config_path", nargs="?", help="experiment or model config (JSON)")
    common.add_argument("--config", dest="config_flag", help="experiment or model config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--episodes", type=int, help="Monte Carlo episode count")
    common.add_argument("--threads", type=int, help="worker threads for episode batches")
    common.add_argument("--out", help="output directory (stdout when omitted)")
    common.add_argument("--trace-out", action="store_true", help="write a per-stage CSV for every episode")
    common.add_argument("--policy", help="trigger as kind[:param], e.g. voi, periodic:2")
    common.add_argument("--myopic", action="store_true", help="use the myopic value of information")
    parser = _Parser(prog="voictl", description="Event-triggered LQG control experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    helps = {
        "validate": "check a model config",
        "riccati": "dump the Riccati schedule as CSV",
        "dp": "threshold and value-function tables",
        "simulate": "Monte Carlo batch with loss estimates",
        "sweep": "rate-regulation trade-off over lambda",
        "verify": "oracle checks with a JSON pass/fail report",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


# ------------------------------------------------------------ configuration


def _read_json(path: Path, field: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(field, f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(field, f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(field, "top level must be a JSON object")
    return data


def resolve_config(args) -> tuple[dict[str, Any], ProcessModel]:
    """Merge config file and flags; returns the fully resolved config and the model."""
    path = args.config_flag or args.config_path
    if not path:
        raise ConfigError("config", "no config file given (positional or --config)")
    path = Path(path)
    raw = _read_json(path, "config")
    model_cfg = raw.get("model", raw)
    if isinstance(model_cfg, str):
        model_cfg = _read_json(path.parent / model_cfg, "model")
    try:
        model = model_from_dict(model_cfg)
    except ModelError as exc:
        raise ConfigError(exc.field, str(exc)) from None

    grid_raw = raw.get("grid", {})
    try:
        grid = GridSpec(**grid_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("grid", str(exc)) from None

    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {seed!r}")
    episodes = args.episodes if args.episodes is not None else raw.get("episodes", 10000)
    if isinstance(episodes, bool) or not isinstance(episodes, int) or episodes < 1:
        raise ConfigError("episodes", f"must be an integer >= 1, got {episodes!r}")
    threads = args.threads if args.threads is not None else raw.get("threads", 1)
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads", f"must be an integer >= 1, got {threads!r}")
    lambdas = raw.get("lambdas", DEFAULT_LAMBDAS)
    if not isinstance(lambdas, list) or not lambdas or not all(
            isinstance(v, (int, float)) and 0.0 < v < 1.0 for v in lambdas):
        raise ConfigError("lambdas", "must be a non-empty list of values in (0, 1)")

    cfg = {
        "config_file": str(path),
        "model": model_to_dict(model),
        "policy": args.policy or raw.get("policy", "voi"),
        "controller": raw.get("controller", "certainty_equivalent"),
        "myopic": bool(args.myopic or raw.get("myopic", False)),
        "grid": {"half_width": grid.half_width, "points": grid.points, "quad_nodes": grid.quad_nodes,
                 "rule": grid.rule},
        "episodes": episodes,
        "seed": seed,
        "threads": threads,
        "lambdas": [float(v) for v in lambdas],
        "out": args.out,
        "trace_out": bool(args.trace_out),
    }
    return cfg, model


def _grid(cfg) -> GridSpec:
    return GridSpec(**cfg["grid"])


# ----------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return FLOAT_FMT % float(v)


def _write_csv(target: Path | None, header: list[str], rows, comment: str | None = None) -> None:
    fh = open(target, "w", newline="") if target else sys.stdout
    try:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if target:
            fh.close()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _finite(obj):
    """Strict JSON: non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return str(float(obj))
    return obj


def _emit_json(obj, target: Path | None) -> None:
    # Python floats serialise via repr: shortest round-trip form, at most 17 significant digits
    text = json.dumps(_finite(obj), indent=2, default=_json_default, allow_nan=False)
    if target:
        target.write_text(text + "\n")
    print(text)


def _outdir(cfg) -> Path | None:
    if not cfg["out"]:
        return None
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _flat(M) -> list[float]:
    return list(np.asarray(M, dtype=float).ravel(order="F"))


def _names(sym: str, rows: int, cols: int) -> list[str]:
    return [f"{sym}_{i + 1}_{j + 1}" for j in range(cols) for i in range(rows)]


# --------------------------------------------------------------- commands


def cmd_validate(cfg, model) -> int:
    _emit_json({"status": "ok", "n": model.n, "m": model.m, "N": model.N, "sensors": model.sensor_count,
                "output_dims": list(model.output_dims), "lambda": model.lam, "config": cfg}, None)
    return EXIT_OK


def cmd_riccati(cfg, model) -> int:
    sol = riccati_backward(model)
    n, m = model.n, model.m
    header = ["k"] + _names("S", n, n) + _names("L", m, n) + _names("Gamma", n, n) + ["theta"]
    rows = []
    for k in range(model.N + 2):
        L = _flat(sol.L[k]) if k <= model.N else [None] * (m * n)
        th = float(sol.theta[k]) if k <= model.N else None
        rows.append([k] + _flat(sol.S[k]) + L + _flat(sol.Gamma[k]) + [th])
    out = _outdir(cfg)
    _write_csv(out / "riccati.csv" if out else None, header, rows,
               comment="rows k = 0..N+1; matrix X flattened column-major as X_i_j (row i, column j); "
                       "L and theta are undefined at k = N+1")
    if out:
        _emit_json({"riccati_csv": str(out / "riccati.csv"), "kappa": sol.kappa, "config": cfg}, out / "riccati.json")
    return EXIT_OK


def cmd_dp(cfg, model) -> int:
    sol = riccati_backward(model)
    sched = covariance_schedule(model)
    if model.n != 1 or cfg["myopic"]:
        out = _outdir(cfg)
        target = out / "thresholds.csv" if out else None
        if model.n == 1:
            rows = [[k, myopic_threshold(sol, model.A[k], k), float(sol.theta[k])] for k in range(model.N + 1)]
            _write_csv(target, ["stage", "myopic_threshold", "theta"], rows)
        else:
            print(f"state dimension {model.n} > 1: no exact table; the myopic rule transmits when "
                  "e'A'Gamma_{k+1}Ae >= theta_k", file=sys.stderr)
            _write_csv(target, ["stage", "theta"], [[k, float(sol.theta[k])] for k in range(model.N + 1)])
        return EXIT_OK
    t0 = time.perf_counter()
    table = backward_induction(model, sol, _grid(cfg), sched)
    elapsed = time.perf_counter() - t0
    out = _outdir(cfg)
    th_rows = [[k, extract_threshold(table, sol, k), myopic_threshold(sol, model.A[k], k), float(sol.theta[k])]
               for k in range(model.N + 1)]
    _write_csv(out / "thresholds.csv" if out else None, ["stage", "threshold", "myopic_threshold", "theta"], th_rows,
               comment="threshold: smallest |e| with VoI >= 0 (inf: never transmit)")
    if out:
        val_rows = []
        for k in range(model.N + 1):
            cols = stage_values(table, sol, k)
            val_rows.extend([k, *vals] for vals in zip(cols["e"], cols["V"], cols["rho"], cols["voi"], cols["delta"]))
        _write_csv(out / "values.csv", ["stage", "e", "V", "rho", "voi", "delta"], val_rows)
        _emit_json({"thresholds": [r[1] for r in th_rows], "seconds": elapsed, "config": cfg}, out / "dp.json")
    return EXIT_OK


def _policies(cfg, model, sol, sched):
    try:
        trig = make_trigger(cfg["policy"], model, sol, sched, grid=_grid(cfg), myopic=cfg["myopic"])
        ctrl = ControlPolicy(cfg["controller"])
    except PolicyError as exc:
        raise ConfigError("policy", str(exc)) from None
    except ExactModeError as exc:
        raise ConfigError("policy", str(exc)) from None
    return trig, ctrl


def _write_traces(res, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    model = res.model
    for i in range(res.episodes):
        tr = res.trace(i)
        n, m, p = model.n, model.m, model.p
        header = (["k"] + [f"x_{j + 1}" for j in range(n)] + [f"u_{j + 1}" for j in range(m)] + ["delta"]
                  + [f"y_{j + 1}" for j in range(p)] + [f"nu_{j + 1}" for j in range(p)]
                  + [f"xcheck_{j + 1}" for j in range(n)] + [f"xhat_{j + 1}" for j in range(n)]
                  + [f"etilde_{j + 1}" for j in range(n)] + [f"ehat_{j + 1}" for j in range(n)] + ["varsigma"])
        rows = []
        for k in range(model.N + 1):
            rows.append([k, *tr.x[k], *tr.u[k], bool(tr.delta[k]), *tr.y[k], *tr.nu[k], *tr.xcheck[k], *tr.xhat[k],
                         *tr.etilde[k], *tr.ehat[k], tr.varsigma[k]])
        blank = [None] * (len(header) - 1 - n)
        rows.append([model.N + 1, *tr.x[model.N + 1], *blank])
        _write_csv(d / f"episode_{tr.episode}.csv", header, rows,
                   comment=f"seed {tr.seed}; episode {tr.episode}; last row holds the terminal state")


def cmd_simulate(cfg, model) -> int:
    sol = riccati_backward(model)
    sched = covariance_schedule(model)
    trig, ctrl = _policies(cfg, model, sol, sched)
    out = _outdir(cfg)
    keep = cfg["trace_out"] and out is not None
    t0 = time.perf_counter()
    res = run_batch(model, trig, ctrl, episodes=cfg["episodes"], seed=cfg["seed"], sol=sol, schedule=sched,
                    keep_traces=keep, threads=cfg["threads"])
    rep = evaluate(res, model, sol)
    elapsed = time.perf_counter() - t0
    if out:
        N = model.N
        rows = zip(range(res.episodes), res.rate_sum / (N + 1), res.reg_sum / (N + 1), res.phi(), res.psi_sum,
                   res.transmissions)
        _write_csv(out / "episodes.csv", ["episode", "R", "J", "Phi", "Psi", "transmissions"], rows,
                   comment="per-episode rate R, regulation J, trade-off Phi, equivalent loss Psi")
        if keep:
            _write_traces(res, out / "traces")
    summary = {"trigger": trig.label, "controller": ctrl.kind, "seed": cfg["seed"], "loss": rep.as_dict(),
               "seconds": elapsed, "config": cfg}
    _emit_json(summary, out / "summary.json" if out else None)
    return EXIT_OK


def cmd_sweep(cfg, model) -> int:
    try:
        make_trigger(cfg["policy"], model, riccati_backward(model), covariance_schedule(model),
                     grid=_grid(cfg), myopic=cfg["myopic"])
    except (PolicyError, ExactModeError) as exc:
        raise ConfigError("policy", str(exc)) from None

    def builder(m, sol, sched, table):
        return make_trigger(cfg["policy"], m, sol, sched, table=table, myopic=cfg["myopic"]), ControlPolicy(
            cfg["controller"])

    rows = sweep_lambda(model, cfg["lambdas"], builder, episodes=cfg["episodes"], seed=cfg["seed"],
                        grid=_grid(cfg), threads=cfg["threads"])
    out = _outdir(cfg)
    if out:
        cols = ["lambda", "theta0", "R", "R_se", "J", "J_se", "Phi", "Phi_se"]
        _write_csv(out / "sweep.csv", cols, ([r[c] for c in cols] for r in rows),
                   comment="one Monte Carlo point per lambda; noise shared across lambdas")
    _emit_json({"rows": rows, "seed": cfg["seed"], "config": cfg}, out / "sweep.json" if out else None)
    return EXIT_OK


def cmd_verify(cfg, model) -> int:
    from .oracle import run_checks

    report = run_checks(model, cfg)
    out = _outdir(cfg)
    report["config"] = cfg
    _emit_json(report, out / "verify.json" if out else None)
    failing = [c["name"] for c in report["checks"] if c["status"] == "fail"]
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


HANDLERS = {"validate": cmd_validate, "riccati": cmd_riccati, "dp": cmd_dp, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        print(f"voictl: unknown subcommand {argv[0]!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voictl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg, model = resolve_config(args)
        return HANDLERS[args.command](cfg, model)
    except ConfigError as exc:
        print(f"voictl: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
