"""Command-line front end.

Subcommands:

``run``
    one experiment -> ``log.csv``, ``gains.csv``, ``metrics.txt``, ``run.json``
``grid``
    alpha_p in {1.0, 0.5, 0.3} x {stock, adaptive}, one directory per run,
    plus ``summary.csv`` and a long-format ``plot_long.csv``
``replay-metrics``
    recompute ``metrics.txt`` from an existing ``log.csv``

Exit codes: 0 success, 1 aborted run / failed replay, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import LOOPS, RcacHyper, parse_hyper_file
from .autopilot import GainSet, parse_gain_file
from .mission import (
    GAIN_COLUMNS, LOG_COLUMNS, ExperimentConfig, LogFormatError, MissionFileError,
    compute_metrics, default_mission, load_mission, read_csv, run_experiment, write_csv,
)

log = logging.getLogger("rcac_autopilot")

OUT_ENV = "RCAC_AUTOPILOT_OUT"
GRID_ALPHAS = (1.0, 0.5, 0.3)
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not np.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _loops(text):
    loops = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in loops if s not in LOOPS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown loop(s) {bad}; choose from {','.join(LOOPS)}")
    return loops


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mission", default="default", help="mission file or 'default'")
    p.add_argument("--gains", type=Path, help="gain file (key = value)")
    p.add_argument("--hyper", type=Path, help="RCAC hyperparameter file")
    p.add_argument("--loops", type=_loops, default=LOOPS, help="adaptive loops to enable, e.g. r,v,q,omega")
    p.add_argument("--unmask-ff", "--unmask", dest="unmask", action="store_true",
                   help="let RCAC adapt the normally masked rate-loop coefficient")
    p.add_argument("--feedforward", action="store_true", help="send trajectory velocity feedforward")
    p.add_argument("--dt", type=_positive_float, default=1.0 / 500, help="physics step [s]")
    p.add_argument("--duration", type=_positive_float, default=180.0, help="duration cap [s]")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--jitter", type=float, default=0.0, help="initial horizontal offset bound [m]")
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcac-autopilot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--alpha", type=_positive_float, default=1.0, help="gain detuning factor alpha_p")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--stock", dest="adaptive", action="store_false")
    mode.add_argument("--adaptive", dest="adaptive", action="store_true")
    _experiment_flags(run)

    grid = sub.add_parser("grid", help="run the stock/adaptive x alpha_p grid")
    grid.add_argument("--alphas", type=lambda s: tuple(_positive_float(x) for x in s.split(",")),
                      default=GRID_ALPHAS)
    grid.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count, max 6)")
    _experiment_flags(grid)

    rep = sub.add_parser("replay-metrics", help="recompute metrics from a log.csv")
    rep.add_argument("log_path", type=Path)
    rep.add_argument("--mission", default=None, help="mission used for the run (default: from run.json)")
    rep.add_argument("--feedforward", action="store_true", default=None)
    rep.add_argument("--out", type=Path, default=None, help="write metrics here instead of stdout")
    return parser


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "out"))


def _load_plan(spec: str):
    return default_mission() if spec == "default" else load_mission(spec)


def _config(args, alpha: float, adaptive: bool) -> ExperimentConfig:
    gains = parse_gain_file(args.gains) if args.gains else GainSet()
    hyper = parse_hyper_file(args.hyper) if args.hyper else RcacHyper()
    if args.unmask:
        hyper.omega_mask = ()
    return ExperimentConfig(
        alpha_p=alpha, adaptive=adaptive, loops=args.loops, hyper=hyper, gains=gains,
        dt=args.dt, duration=args.duration, seed=args.seed, jitter=args.jitter,
        feedforward=args.feedforward,
    )


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def run_one(config: ExperimentConfig, mission: str, out: Path) -> dict:
    """Run ``config`` and write its outputs to ``out``; returns the manifest."""
    t0 = time.perf_counter()
    plan = _load_plan(mission)
    res = run_experiment(config, plan)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"log": out / "log.csv", "gains": out / "gains.csv", "metrics": out / "metrics.txt"}
    write_csv(paths["log"], LOG_COLUMNS, res.log)
    write_csv(paths["gains"], GAIN_COLUMNS, res.gains_log)
    paths["metrics"].write_text(res.metrics.to_text())
    mode = "adaptive" if config.adaptive else "stock"
    manifest = {
        "id": f"{mode}_a{config.alpha_p!r}_s{config.seed}",
        "version": __version__,
        "mode": mode,
        "mission": mission,
        "config": _jsonable(config),
        "outputs": {k: str(p) for k, p in paths.items()},
        "runtime_s": time.perf_counter() - t0,
        "abort_reason": res.abort_reason,
        "metrics": {
            "position_rmse": res.metrics.position_rmse,
            "completion_time": res.metrics.completion_time,
            "completed": res.metrics.completed,
            "theta_final_norm": {k: float(np.linalg.norm(v)) for k, v in res.metrics.theta_final.items()},
        },
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_run(args) -> int:
    config = _config(args, args.alpha, args.adaptive)
    out = _out_dir(args)
    man = run_one(config, args.mission, out)
    m = man["metrics"]
    print(f"{man['id']}: rmse={m['position_rmse']:.4f} m completed={m['completed']} "
          f"time={m['completion_time']} -> {out}")
    if man["abort_reason"]:
        print(f"aborted: {man['abort_reason']}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _grid_job(job):
    config, mission, out = job
    try:
        return run_one(config, mission, out)
    except Exception as exc:  # recorded per row; the coordinator decides the exit code
        return {"id": out.name, "mode": "adaptive" if config.adaptive else "stock",
                "config": {"alpha_p": config.alpha_p}, "abort_reason": f"{type(exc).__name__}: {exc}",
                "metrics": {"position_rmse": float("nan"), "completion_time": None, "completed": False},
                "outputs": {}}


def _long_rows(man):
    """Plot-ready rows: run id, alpha, mode, t, variable, value."""
    if not man["outputs"]:
        return
    L = read_csv(man["outputs"]["log"], LOG_COLUMNS)
    G = read_csv(man["outputs"]["gains"], GAIN_COLUMNS)
    c = {n: i for i, n in enumerate(LOG_COLUMNS)}
    err = np.linalg.norm(L[:, c["r_sp_x"]:c["r_sp_x"] + 3] - L[:, c["r_x"]:c["r_x"] + 3], axis=1)
    series = {"position_error": err}
    col = 1
    for loop, n in (("r", 3), ("v", 9), ("q", 3), ("omega", 12)):
        series[f"theta_{loop}_norm"] = np.linalg.norm(G[:, col:col + n], axis=1)
        col += n
    alpha, mode = man["config"]["alpha_p"], man["mode"]
    for name, values in series.items():
        for t, v in zip(L[:, 0], values):
            yield f"{man['id']},{alpha!r},{mode},{float(t)!r},{name},{float(v)!r}\n"


def cmd_grid(args) -> int:
    out = _out_dir(args)
    _load_plan(args.mission)  # fail fast on a bad mission file
    jobs = []
    for alpha in args.alphas:
        for adaptive in (False, True):
            cfg = _config(args, alpha, adaptive)
            name = f"{'adaptive' if adaptive else 'stock'}_a{alpha!r}"
            jobs.append((cfg, args.mission, out / name))
    workers = args.workers or min(len(jobs), os.cpu_count() or 1, 6)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(_grid_job, jobs))
    else:
        manifests = [_grid_job(j) for j in jobs]

    out.mkdir(parents=True, exist_ok=True)
    failed = False
    with open(out / "summary.csv", "w", newline="\n") as fh:
        fh.write("alpha,mode,rmse,completion_time,completed,abort_reason\n")
        for man in manifests:
            m = man["metrics"]
            reason = (man["abort_reason"] or "").replace(",", ";").replace("\n", " ")
            failed |= bool(man["abort_reason"])
            fh.write(f"{man['config']['alpha_p']!r},{man['mode']},{m['position_rmse']!r},"
                     f"{'' if m['completion_time'] is None else repr(m['completion_time'])},"
                     f"{m['completed']},{reason}\n")
            print(f"{man['id']:<22} rmse={m['position_rmse']:.4f} completed={m['completed']} "
                  f"time={m['completion_time']}")
    with open(out / "plot_long.csv", "w", newline="\n") as fh:
        fh.write("run,alpha,mode,t,variable,value\n")
        for man in manifests:
            fh.writelines(_long_rows(man))
    print(f"summary -> {out / 'summary.csv'}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_replay_metrics(args) -> int:
    manifest_path = args.log_path.parent / "run.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    mission = args.mission or manifest.get("mission", "default")
    ff = args.feedforward if args.feedforward is not None else manifest.get("config", {}).get("feedforward", False)
    try:
        data = read_csv(args.log_path, LOG_COLUMNS)
    except (LogFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    text = compute_metrics(data, _load_plan(mission), ff).to_text()
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    original = args.log_path.parent / "metrics.txt"
    if original.exists() and original.read_text() != text:
        print(f"error: recomputed metrics differ from {original}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "replay-metrics": cmd_replay_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (MissionFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
