"""``beamtrack`` command line: generate, train, eval and sweep.

Every command reads an optional JSON config (``--config``), applies the
top-level flag overrides, writes ``config.resolved.json`` into ``--out``
and then its artifacts. Failures print one JSON object on stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .channel import generate_trajectories
from .config import RunConfig, load_config, write_resolved
from .dataset import Dataset, read_dataset, write_csv, write_dataset, write_summary_csv
from .evaluation import (FIGURE_AXES, ModelStore, evaluate, summarize, sweep, write_episode_csv,
                         write_figure_csv, write_sweep_csv)
from .tracker import TrainingDiverged, load_model, save_model, train

log = logging.getLogger("beamtrack")


class CliError(Exception):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _need(path, what):
    if path is None:
        raise CliError(f"--{what} is required")
    if not Path(path).is_file():
        raise CliError(f"{what} file not found: {path}")
    return Path(path)


def _check_arch(model, cfg: RunConfig, path):
    if model.arch != cfg.network:
        raise CliError(f"architecture in {path} ({asdict(model.arch)}) does not match "
                       f"config network ({asdict(cfg.network)})")


def cmd_generate(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg)
    write_resolved(cfg, out)
    g = cfg.generation
    log.info("generating %d trajectories (seed %d)", g.count, cfg.seed)
    trajs = generate_trajectories(g.scenario, g.count, cfg.seed)
    ds = Dataset(trajs, g.n_train, cfg.seed, asdict(g))
    write_dataset(out / "dataset.bin", ds)
    write_summary_csv(out / "dataset_summary.csv", ds)
    if args.csv:
        write_csv(out / "trajectories.csv", trajs)
    return {"dataset": str(out / "dataset.bin"), "n_train": ds.n_train, "n_test": len(ds.test)}


def _write_train_log(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_angle_loss", "mean_alpha_loss"])
        for epoch, ang, alp in curve:
            w.writerow([epoch, repr(ang), repr(alp)])


def cmd_train(cfg: RunConfig, args) -> dict:
    ds = read_dataset(_need(args.dataset, "dataset"))
    if not ds.train:
        raise CliError("dataset has an empty training split")
    out = _out_dir(cfg)
    write_resolved(cfg, out)
    tc = cfg.training_config()
    log.info("training on %d trajectories at %.1f dB", len(ds.train), tc.train_snr_db)
    model = train(ds.train, tc, cfg.network,
                  log=lambda e, a, b: log.info("epoch %d: angle %.6g alpha %.6g", e, a, b))
    save_model(out / "weights.bin", model)
    curve = model.meta["loss_curve"]
    _write_train_log(out / "train_log.csv", curve)
    return {"weights": str(out / "weights.bin"), "epochs": len(curve),
            "final_angle_loss": curve[-1][1]}


def _model_store(cfg: RunConfig, ds, weights) -> ModelStore:
    store = ModelStore(ds.train, cfg.training_config(),
                       log=lambda msg: log.info("%s", msg))
    if weights is not None:
        model = load_model(weights)
        _check_arch(model, cfg, weights)
        store.add(model)
    return store


def _save_new_models(store: ModelStore, preloaded: set, out: Path):
    for (n_r, dl, snr), model in sorted(store.models.items()):
        if (n_r, dl, snr) not in preloaded:
            (out / "models").mkdir(exist_ok=True)
            save_model(out / "models" / f"ml_nr{n_r}_d{dl:g}_snr{snr:g}.bin", model)


def cmd_eval(cfg: RunConfig, args) -> dict:
    ds = read_dataset(_need(args.dataset, "dataset"))
    if not ds.test:
        raise CliError("dataset has an empty test split")
    e = cfg.eval
    store = None
    if "ml" in e.trackers:
        weights = _need(args.weights, "weights")
        store = _model_store(cfg, ds, weights)
        key = store.key(e.n_r, e.d_over_lambda, e.train_snr_db)
        if key not in store.models:
            raise CliError(f"weights in {weights} were trained for (n_r, d/lambda, SNR) = "
                           f"{next(iter(store.models))}, eval config needs {key}")
    out = _out_dir(cfg)
    write_resolved(cfg, out)
    res = evaluate(e, ds.test, ds.train, store, cfg.effective_parallel())
    rows = [summarize("test_snr_db", float(e.test_snr_db), kind, res[kind], e)
            for kind in e.trackers]
    write_sweep_csv(out / "eval.csv", rows)
    for kind in e.trackers:
        write_episode_csv(out / f"episodes_{kind}.csv", res[kind], kind)
    return {r.tracker: r.p0 for r in rows}


def cmd_sweep(cfg: RunConfig, args) -> dict:
    ds = read_dataset(_need(args.dataset, "dataset"))
    if not ds.test:
        raise CliError("dataset has an empty test split")
    weights = _need(args.weights, "weights") if args.weights is not None else None
    store = _model_store(cfg, ds, weights)
    preloaded = set(store.models)
    out = _out_dir(cfg)
    write_resolved(cfg, out)
    figures = args.figure or cfg.sweep.figures
    summary = {}
    for fig in figures:
        if fig not in FIGURE_AXES:
            raise CliError(f"unknown figure {fig!r}")
        axis = FIGURE_AXES[fig]
        grid = cfg.sweep.grids[fig]
        bases = ([replace(cfg.eval, test_snr_db=float(s)) for s in cfg.sweep.fig6_test_snr_db]
                 if fig == "fig6" else [cfg.eval])
        rows = []
        for base in bases:
            log.info("%s: sweeping %s over %s", fig, axis, grid)
            rows += sweep(axis, grid, base, ds.test, ds.train, store, cfg.effective_parallel(),
                          log=lambda msg: log.info("  %s", msg))
        write_sweep_csv(out / f"sweep_{fig}.csv", rows)
        write_figure_csv(out / f"{fig}.csv", fig, rows)
        summary[fig] = len(rows)
    _save_new_models(store, preloaded, out)
    return summary


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (generation and training)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--parallel", type=int, help="worker processes for evaluation")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="force serial execution for byte-reproducible outputs")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="beamtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="simulate trajectories")
    g.add_argument("--csv", action="store_true", help="also export every trajectory as CSV")
    t = sub.add_parser("train", parents=[common], help="train the ML tracker")
    t.add_argument("--dataset", help="dataset archive from 'generate'")
    for name, text in [("eval", "evaluate trackers at one operating point"),
                       ("sweep", "run the figure sweeps")]:
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--dataset", help="dataset archive from 'generate'")
        s.add_argument("--weights", help="weights file from 'train'")
        if name == "sweep":
            s.add_argument("--figure", action="append", choices=sorted(FIGURE_AXES),
                           help="restrict to one figure (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, parallel=args.parallel,
                          deterministic=args.deterministic)
        result = COMMANDS[args.command](cfg, args)
    except TrainingDiverged as exc:
        _fail(args.command, exc, epoch=exc.epoch)
        return 1
    except (CliError, ValueError, OSError, json.JSONDecodeError) as exc:
        _fail(args.command, exc)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **result}, sort_keys=True))
    return 0


def _fail(command, exc, **extra):
    err = {"command": command, "status": "error", "error": type(exc).__name__,
           "message": str(exc), **extra}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
