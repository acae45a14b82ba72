"""Command-line entry point: train, eval, sweep, gradcheck and synth.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numerical
divergence, 4 I/O or input-data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck
from .config import (
    DataConfig,
    RunConfig,
    SynthConfig,
    load_houses,
    model_from_tree,
    prepare_splits,
    read_manifest,
    resolve_specs,
    synth_houses,
    train_from_tree,
    _mapping,
    _reject_unknown,
)
from .data import build_windows, split_train_test, write_redd_house
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataIntegrityError,
    DivergenceError,
    GeometryError,
    ParseError,
)
from .metrics import MRE_DEFINITION, evaluate
from .model import PRESET_MASKING, NilmModel, load_checkpoint, predict, save_checkpoint
from .numerics import RngStream
from .sweep import FULL_EPOCHS, SWEEP_EPOCHS, TABLE_GRIDS, SweepGrid, run_sweep
from .training import fit

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("nilmtx")


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    return buf.getvalue()


def _tree(path) -> dict:
    return read_manifest(path) if path else {}


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    run = RunConfig.from_tree(
        _tree(args.manifest), data=args.data, appliance=args.appliance, seed=args.seed,
        preset=args.preset, epochs=args.epochs,
    )
    houses = load_houses(run.data, run.specs)
    splits = prepare_splits(houses, run.appliance, run.specs, run.model.window_len, run.data)
    log.info("%s: %d train, %d val, %d test windows", run.appliance, len(splits.train), len(splits.val),
             len(splits.test))
    model = NilmModel.init(run.model, RngStream(run.train.seed).spawn(1))

    def report(rec):
        log.info("epoch %d loss %.5f val %.5f (%.2fs)", rec.epoch, rec.loss, rec.val_loss, rec.seconds)

    result = fit(model, splits.train, run.train, run.loss_config(), run.masking, splits.val, on_epoch=report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seconds = [r.seconds for r in result.history]
    save_checkpoint(
        result.model,
        out / "model.ckpt",
        extra={"run": run.to_tree(), "config_hash": run.config_hash(), "seconds_per_epoch": seconds,
               "best_epoch": result.best_epoch},
    )
    (out / "manifest.yaml").write_text(yaml.safe_dump(run.to_tree(), sort_keys=True))
    history = [["epoch", "loss", "val_loss"]] + [[r.epoch, repr(r.loss), repr(r.val_loss)] for r in result.history]
    (out / "history.csv").write_text(_csv(history))
    (out / "timing.csv").write_text(_csv([["epoch", "seconds"]] + [[r.epoch, f"{r.seconds:.6f}"] for r in result.history]))
    print(f"trained {run.appliance}: best epoch {result.best_epoch}, loss {result.initial_loss:.4f} -> "
          f"{result.final_loss:.4f}; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if "run" not in extra:
        raise ConfigError(f"{args.checkpoint}: checkpoint carries no run manifest")
    run = RunConfig.from_tree(extra["run"], data=args.data)
    if args.appliance and args.appliance != run.appliance:
        raise ConfigError(f"appliance: checkpoint was trained for {run.appliance!r}, not {args.appliance!r}")
    if model.config != run.model:
        raise ConfigError("checkpoint model config does not match its manifest")
    houses = load_houses(run.data, run.specs)
    _, test_houses = split_train_test(houses)
    stride = run.data.test_stride or run.model.window_len
    windows = [build_windows(h, run.appliance, run.model.window_len, stride, run.specs, run.data.agg_p_max)
               for h in test_houses]
    spec = run.spec
    pred = np.concatenate([predict(model, w.inputs) for w in windows]) * spec.p_max
    true = np.concatenate([w.targets for w in windows]) * spec.p_max
    report = evaluate(pred, true, spec.on_threshold, extra.get("seconds_per_epoch", []))
    row = [run.appliance, extra.get("config_hash", run.config_hash()), f"{report.acc:.6f}", f"{report.f1:.6f}",
           f"{report.mre:.6f}", f"{report.mae:.6f}", f"{report.mean_seconds:.6f}"]
    text = f"# mre = {MRE_DEFINITION}\r\n" + _csv(
        [["appliance", "config_hash", "acc", "f1", "mre", "mae", "sec_per_epoch_mean"], row]
    )
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text.replace("\r\n", "\n"))
    return EXIT_OK


# ---------------------------------------------------------------- sweep


SWEEP_KEYS = ("version", "axis", "values", "appliances", "base", "masking_ratio", "data", "train")


def _appliance_list(tree) -> tuple[list[str], dict]:
    if tree is None:
        return ["fridge"], {}
    if isinstance(tree, list):
        return [str(a) for a in tree], {}
    overrides = _mapping(tree, "appliances")
    return list(overrides), overrides


def cmd_sweep(args) -> int:
    tree = _tree(args.manifest)
    _reject_unknown(tree, SWEEP_KEYS, "")
    axis = args.axis or tree.get("axis")
    if not axis:
        raise ConfigError("axis: required field is missing")
    values = tree.get("values", TABLE_GRIDS.get(axis, []))
    names, overrides = _appliance_list(tree.get("appliances"))
    specs = resolve_specs(overrides)
    base_tree = _mapping(tree.get("base"), "base")
    base_name, base = model_from_tree(base_tree, default_preset="bert4nilm-base")
    train_tree = _mapping(tree.get("train"), "train")
    if "masking_ratio" in train_tree:
        raise ConfigError("train.masking_ratio: set the base masking ratio at the top level")
    train_tree.setdefault("epochs", SWEEP_EPOCHS)
    if args.epochs is not None:
        train_tree["epochs"] = args.epochs
    if args.full_epochs:
        train_tree["epochs"] = FULL_EPOCHS
    train, _, tau = train_from_tree(train_tree, base_name)
    grid = SweepGrid(axis, values, base, float(tree.get("masking_ratio", PRESET_MASKING[base_name])))
    data_tree = _mapping(tree.get("data"), "data")
    if args.data is not None:
        data_tree = {k: v for k, v in data_tree.items() if k != "synthetic"}
        data_tree["dir"] = str(args.data)
    data = DataConfig.from_tree(data_tree)
    if args.appliance:
        names = [args.appliance]
    unknown = [n for n in names if n not in specs]
    if unknown:
        raise ConfigError(f"appliances: no constants for {unknown}")
    houses = load_houses(data, specs)
    splits = {n: prepare_splits(houses, n, specs, base.window_len, data) for n in names}
    seed = args.seed if args.seed is not None else train.seed
    table = run_sweep(grid, splits, specs, train, tau, seed, args.workers, append_proposed=args.preset == "compact")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(table.to_csv())
    (out / "results.txt").write_text(table.to_text())
    (out / "trials.jsonl").write_text(table.to_jsonl())
    (out / "timing.csv").write_text(table.timing_csv())
    sys.stdout.write(table.to_text())
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    names = args.only or None
    if names:
        unknown = sorted(set(names) - set(gradcheck.CASE_NAMES))
        if unknown:
            raise ConfigError(f"--only: unknown cases {unknown}")
    results = gradcheck.run_suite(names)
    failed = [r for r in results if not r.passed]
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        print(f"{mark} {r.name:<24} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} ({r.seconds:.2f}s)")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(r.name for r in failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    tree = _tree(args.manifest)
    tree.pop("version", None)
    names, overrides = _appliance_list(tree.pop("appliances", ["fridge", "microwave"]))
    specs = resolve_specs(overrides)
    if args.seed is not None:
        tree["seed"] = args.seed
    _reject_unknown(tree, ["houses", "duration", "noise_sigma", "seed", "period"], "")
    try:
        cfg = SynthConfig(appliances=tuple(names), **tree)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    for house in synth_houses(cfg, specs):
        write_redd_house(house, out)
    print(f"wrote {cfg.houses} synthetic house(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nilmtx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset_help):
        p.add_argument("--data", help="dataset directory in REDD layout (overrides the manifest)")
        p.add_argument("--appliance", help="target appliance")
        p.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
        p.add_argument("--preset", choices=["compact", "bert4nilm-base"], help=preset_help)
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--workers", type=int, default=1, help="parallel trials (sweep only)")

    p = sub.add_parser("train", help="train one appliance model")
    p.add_argument("manifest", nargs="?", help="training manifest (YAML)")
    common(p, "model preset")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test house")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset directory (defaults to the training data source)")
    p.add_argument("--appliance", help="expected appliance; must match the checkpoint")
    p.add_argument("--out", help="write the metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one-factor hyper-parameter sweep")
    p.add_argument("manifest", nargs="?", help="grid manifest (YAML)")
    common(p, "'compact' appends the compact-preset row to the table")
    p.add_argument("--axis", help="override the grid axis")
    p.add_argument("--full-epochs", action="store_true", help=f"train every cell for {FULL_EPOCHS} epochs")
    p.add_argument("--out", default="sweep", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference certification of every op")
    p.add_argument("--only", nargs="*", help="run only these cases")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write synthetic homes in REDD layout")
    p.add_argument("manifest", nargs="?", help="synthetic spec manifest (YAML)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ParseError, DataIntegrityError, AlignmentError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
