"""Command-line interface: ``lagot <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .bench import (METRIC_SETTINGS, SETTINGS, DatasetSpec, generate, ground_truth_metric, read_dataset,
                    w2_marginal_error, write_dataset)
from .config import ConfigError, RunConfig, schema_help
from .lagrangian import Lagrangian
from .metric_learn import (MetricLearnState, alignment_score, evaluation_grid, metric_grid_rows, outer_step)
from .nlot import NlotState, append_jsonl, push_forward, train_step, transport_paths
from .nn import NonFiniteError, load_checkpoint, save_checkpoint
from .spline import build_spline, export_paths_csv

log = logging.getLogger("lagot")

CHECKPOINT = "checkpoint"
LEARNED = "metric.learned"


class RunError(RuntimeError):
    """Failure that maps to exit code 1 with a one-line diagnostic."""


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"{run_dir} is locked by another process (remove {lock} if it is stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _truncate_log(path: Path, last_step: int) -> None:
    """Drop log lines written after the checkpoint being resumed."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["step"] <= last_step]
    path.write_text("".join(ln + "\n" for ln in keep))


def _copy_data(src: Path, dst: Path) -> None:
    if not (src / "manifest.json").exists():
        raise RunError(f"{src} is not a data directory (manifest.json missing)")
    dst.mkdir(parents=True, exist_ok=True)
    for f in sorted(src.iterdir()):
        if f.name == "manifest.json" or (f.name.startswith("rho_") and f.suffix == ".csv"):
            shutil.copyfile(f, dst / f.name)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    if getattr(args, "out", None):
        cfg = cfg.with_overrides([f"out={args.out}"])
    return cfg


def _make_lagrangian(cfg: RunConfig) -> Lagrangian:
    return Lagrangian.from_name(cfg.lagrangian_name, **cfg.lagrangian_kwargs())


def _load_run(run_dir: Path) -> tuple[RunConfig, dict, list]:
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise RunError(f"{run_dir} has no config.txt")
    cfg = RunConfig.load(cfg_path)
    manifest, measures = read_dataset(run_dir / "data")
    return cfg, manifest, measures


def _checkpoint(run_dir: Path) -> dict:
    prefix = run_dir / CHECKPOINT
    if not prefix.with_name(CHECKPOINT + ".manifest").exists():
        raise RunError(f"no checkpoint in {run_dir}")
    return load_checkpoint(prefix)


def _nlot_state(cfg: RunConfig, d: int) -> NlotState:
    return NlotState.init(_make_lagrangian(cfg), cfg.nlot(), cfg["seed"], d)


def _metric_state(cfg: RunConfig, k: int, d: int) -> MetricLearnState:
    return MetricLearnState.init(k, cfg.metric(), cfg["seed"], d)


def _held_out(cfg: RunConfig, manifest: dict, measures: list) -> list[np.ndarray]:
    """Independent test samples when the data came from a known generator."""
    if manifest.get("name") in SETTINGS:
        spec = DatasetSpec(manifest["name"], cfg["eval.samples"], int(manifest["seed"]))
        return [m.samples for m in generate(spec, "test")]
    n = min(len(m) for m in measures)
    return [m.samples[:n] for m in measures]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_nlot(cfg: RunConfig, manifest: dict, measures: list, state: NlotState) -> dict:
    test = _held_out(cfg, manifest, measures)
    X, Yt = test[0], test[1]
    Y = push_forward(state, X)
    out = {"setting": manifest.get("name"), "lagrangian": cfg.lagrangian_name, "step": state.step,
           "eval_samples": len(X), "w2_error": w2_marginal_error(Y, Yt)}
    if manifest.get("name") == "translation":
        out["map_error"] = float(np.linalg.norm(Y - (X + np.array([2.0, 0.0])), axis=1).mean())
    elif manifest.get("name") == "identity":
        out["map_error"] = float(np.linalg.norm(Y - X, axis=1).mean())
    return out


def evaluate_metric(cfg: RunConfig, manifest: dict, measures: list, state: MetricLearnState) -> dict:
    grid = evaluation_grid(measures, cfg["metric.grid"])
    out = {"setting": manifest.get("name"), "step": state.step, "pairs": len(state.pairs)}
    if manifest.get("name") in METRIC_SETTINGS:
        out["alignment_score"] = alignment_score(ground_truth_metric(manifest["name"]), state.metric, grid)
    return out


def _write_metric_grid(path: Path, cfg: RunConfig, measures: list, state: MetricLearnState) -> None:
    rows = metric_grid_rows(state.metric, evaluation_grid(measures, cfg["metric.grid"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "a11", "a12", "a22"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = DatasetSpec(args.setting, args.n, args.seed)
    path = write_dataset(args.out, spec, generate(spec))
    print(path)
    return 0


def _prepare_run(args, metric: bool) -> tuple[RunConfig, Path, dict, list, bool]:
    if args.resume:
        run_dir = Path(args.resume)
        cfg, manifest, measures = _load_run(run_dir)
        if args.set:
            cfg = cfg.with_overrides(args.set)
        return cfg, run_dir, manifest, measures, True
    if not args.data:
        raise ConfigError("--data is required unless --resume is given")
    cfg = _resolve_config(args)
    manifest, measures = read_dataset(args.data)
    overrides = [f"setting={manifest['name']}"] if manifest.get("name") in SETTINGS else []
    if metric:
        overrides.append(f"lagrangian={LEARNED}")
    cfg = cfg.with_overrides(overrides)
    if not metric and cfg.lagrangian_name == LEARNED:
        raise ConfigError("the learned metric is only available through train-metric")
    if len(measures) < 2:
        raise RunError("training needs at least two measures")
    run_dir = Path(cfg["out"])
    return cfg, run_dir, manifest, measures, False


def cmd_train(args) -> int:
    cfg, run_dir, manifest, measures, resume = _prepare_run(args, metric=False)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        if not resume:
            _copy_data(Path(args.data), run_dir / "data")
        cfg.save(run_dir / "config.txt")
        state = _nlot_state(cfg, measures[0].dim)
        log_path = run_dir / "metrics.jsonl"
        if resume:
            state.load_tensors(_checkpoint(run_dir))
            _truncate_log(log_path, state.step)
        else:
            log_path.write_text("")
            save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        mu, nu = measures[0].samples, measures[1].samples
        while state.step < cfg["steps"]:
            stats = train_step(state, mu, nu)
            if stats.step % cfg["log.every"] == 0 or stats.step == cfg["steps"]:
                append_jsonl(log_path, stats.as_dict())
                log.info("step %d dual %.6g residual %.4g energy %.6g", stats.step, stats.dual_loss,
                         stats.mean_conjugate_residual, stats.mean_path_energy)
            if stats.step % cfg["checkpoint.every"] == 0:
                save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        if cfg["steps"] > 0:
            _write_json(run_dir / "metrics.json", evaluate_nlot(cfg, manifest, measures, state))
    print(run_dir)
    return 0


def cmd_train_metric(args) -> int:
    cfg, run_dir, manifest, measures, resume = _prepare_run(args, metric=True)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        if not resume:
            _copy_data(Path(args.data), run_dir / "data")
        cfg.save(run_dir / "config.txt")
        state = _metric_state(cfg, len(measures), measures[0].dim)
        log_path = run_dir / "metrics.jsonl"
        if resume:
            state.load_tensors(_checkpoint(run_dir))
            _truncate_log(log_path, state.step)
        else:
            log_path.write_text("")
            save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        samples = [m.samples for m in measures]
        truth = ground_truth_metric(manifest["name"]) if manifest.get("name") in METRIC_SETTINGS else None
        grid = evaluation_grid(measures, cfg["metric.grid"])
        while state.step < cfg["steps"]:
            stats = outer_step(state, samples)
            if stats.step % cfg["log.every"] == 0 or stats.step == cfg["steps"]:
                rec = stats.as_dict()
                if truth is not None:
                    rec["alignment_score"] = alignment_score(truth, state.metric, grid)
                append_jsonl(log_path, rec)
                log.info("metric step %d mean dual %.6g%s", stats.step, rec["mean_dual_loss"],
                         f" alignment {rec['alignment_score']:.4f}" if truth is not None else "")
            if stats.step % cfg["checkpoint.every"] == 0:
                save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        save_checkpoint(run_dir / CHECKPOINT, state.tensors())
        if cfg["steps"] > 0:
            _write_metric_grid(run_dir / "metric_grid.csv", cfg, measures, state)
            _write_json(run_dir / "metrics.json", evaluate_metric(cfg, manifest, measures, state))
    print(run_dir)
    return 0


def _restore(run_dir: Path):
    cfg, manifest, measures = _load_run(run_dir)
    tensors = _checkpoint(run_dir)
    if cfg.lagrangian_name == LEARNED:
        state = _metric_state(cfg, len(measures), measures[0].dim)
    else:
        state = _nlot_state(cfg, measures[0].dim)
    state.load_tensors(tensors)
    return cfg, manifest, measures, state


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, manifest, measures, state = _restore(run_dir)
    with run_lock(run_dir):
        if isinstance(state, MetricLearnState):
            result = evaluate_metric(cfg, manifest, measures, state)
            _write_metric_grid(run_dir / "metric_grid.csv", cfg, measures, state)
        else:
            result = evaluate_nlot(cfg, manifest, measures, state)
        _write_json(run_dir / "metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def _paths(cfg: RunConfig, measures: list, state) -> list:
    count = cfg["paths.count"]
    if isinstance(state, MetricLearnState):
        per = max(1, count // len(state.pairs))
        out = []
        for i, inner in enumerate(state.pairs):
            X, Y, phi = transport_paths(inner, measures[i].samples[:per])
            out += [build_spline(x, y, p) for x, y, p in zip(X, Y, phi)]
        return out
    X, Y, phi = transport_paths(state, measures[0].samples[:count])
    return [build_spline(x, y, p) for x, y, p in zip(X, Y, phi)]


def cmd_export_paths(args) -> int:
    run_dir = Path(args.run)
    cfg, _, measures, state = _restore(run_dir)
    out = Path(args.out) if args.out else run_dir / "paths.csv"
    export_paths_csv(out, _paths(cfg, measures, state), cfg["paths.resolution"])
    print(out)
    return 0


def cmd_plot(args) -> int:
    from . import plot

    run_dir = Path(args.run)
    cfg, manifest, measures, state = _restore(run_dir)
    out = Path(args.out) if args.out else run_dir / "figure.svg"
    title = f"{manifest.get('name', '')} ({cfg.lagrangian_name}, step {state.step})"
    if isinstance(state, MetricLearnState):
        grid = evaluation_grid(measures, cfg["metric.grid"])
        plot.sequence_figure(out, [m.samples for m in measures], state.metric, grid, title)
    else:
        src = measures[0].samples[:512]
        L = state.lagrangian
        plot.transport_figure(out, src, measures[1].samples[:512], push_forward(state, src),
                              _paths(cfg, measures, state), potential=L.potential,
                              metric=L.metric, grid=evaluation_grid(measures, cfg["metric.grid"])
                              if L.metric is not None else None, title=title)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagot", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="config keys:\n" + schema_help())
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--setting", required=True, choices=SETTINGS, metavar="NAME",
                   help="one of: " + ", ".join(SETTINGS))
    g.add_argument("--n", type=int, default=None, help="samples per measure")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "fit a transport map between two measures"),
                             ("train-metric", cmd_train_metric, "learn a metric from a sequence of measures")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", help="key = value config file")
        t.add_argument("--data", help="data directory written by gen-data")
        t.add_argument("--out", help="run directory (overrides the config's out key)")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        t.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted run")
        t.set_defaults(func=func)

    for name, func, text in (("eval", cmd_eval, "recompute metrics.json for a run"),
                             ("export-paths", cmd_export_paths, "write transport paths as CSV"),
                             ("plot", cmd_plot, "write an SVG figure")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--run", required=True, help="run directory")
        if name != "eval":
            e.add_argument("--out", help="output file")
        e.set_defaults(func=func)
    return p


def _thread_limit():
    raw = os.environ.get("LAGOT_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"lagot: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"lagot: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (RunError, OSError, ValueError, KeyError) as exc:
        print(f"lagot: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
