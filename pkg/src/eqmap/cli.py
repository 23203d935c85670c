"""Command-line front end: one binary, subcommand per pipeline step.

Exit codes: 0 ok, 2 usage, 3 not-found, 4 data/format, 5 numeric
failure. Errors print a single "error: <kind>: <message>" line on
stderr. Results are printed as key=value lines on stdout, including
content digests so reruns can be compared byte-for-byte. EQMP_SEED
provides a default seed wherever --seed is omitted.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys

import numpy as np

from .annotations import propagate_dataset
from .datasetio import build_dataset, save_dataset
from .errors import (DataFormatError, NotFoundError, NumericFailure,
                     UsageError)
from .harness import (GRID_KINDS, ExperimentSpec, ablation_grid, emit_report,
                      ensure_dataset, load_cached_dataset, parse_result_csv)
from .model import Model, load_model, save_model
from .runconfig import RunConfig, load_config, save_config, set_key
from .training import (MetricsRow, STRATEGIES, evaluate, metrics_to_csv,
                       train)

__all__ = ["main"]

_PROP_SEED_TAG = 0xF10
_MODEL_SEED_TAG = 0x0DE1        # matches the harness cell runner


def _fail(code: int, kind: str, message) -> int:
    text = str(message).replace("\n", " ")
    print(f"error: {kind}: {text}", file=sys.stderr)
    return code


def _say(**pairs) -> None:
    for key, value in pairs.items():
        print(f"{key}={value}")


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _env_seed() -> int | None:
    raw = os.environ.get("EQMP_SEED")
    if raw is None:
        return None
    try:
        return int(raw, 10)
    except ValueError:
        raise UsageError(f"EQMP_SEED must be an integer, got {raw!r}")


def _pick_seed(flag: int | None) -> int | None:
    return flag if flag is not None else _env_seed()


def _runconfig(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for item in getattr(args, "set", None) or []:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set wants section.key=value, got {item!r}")
        config = set_key(config, dotted.strip(), raw.strip())
    return config

def _checked(config: RunConfig) -> RunConfig:
    try:
        config.train.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return config


def _init_model(config: RunConfig, seed: int) -> Model:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _MODEL_SEED_TAG])))
    return Model.init(config.model, rng)


def _write(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _runconfig(args)
    seed = _pick_seed(args.seed)
    if seed is not None:
        config = dataclasses.replace(
            config, data=dataclasses.replace(config.data, seed=seed))
    dataset = build_dataset(config.data)
    digest = save_dataset(dataset, args.out, force=args.force)
    _say(out=args.out, frames=len(dataset.sequence.frames), digest=digest)
    return 0


def cmd_train(args) -> int:
    config = _runconfig(args)
    if args.strategy is not None:
        config = set_key(config, "train.strategy", args.strategy)
    seed = _pick_seed(args.seed)
    if seed is not None:
        config = set_key(config, "train.seed", str(seed))
        config = set_key(config, "train.ann_seed", str(seed))
    _checked(config)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")

    data = load_cached_dataset(args.data)
    stage2 = load_cached_dataset(args.stage2_data) if args.stage2_data else None
    eval_data = load_cached_dataset(args.eval_data) if args.eval_data else None

    os.makedirs(args.out, exist_ok=True)
    resolved = RunConfig(data=data.config, model=config.model,
                         train=config.train)
    config_path = os.path.join(args.out, "config.txt")
    save_config(resolved, config_path)

    model = _init_model(config, config.train.seed)
    model, rows = train(model, config.train, data, stage2, eval_data)

    metrics_path = os.path.join(args.out, "metrics.csv")
    _write(metrics_path, metrics_to_csv(rows))
    checkpoint_path = os.path.join(args.out, "checkpoint.eqmp")
    save_model(checkpoint_path, model)
    _say(config=config_path, metrics=metrics_path, checkpoint=checkpoint_path,
         metrics_sha256=_sha256(metrics_path),
         checkpoint_sha256=_sha256(checkpoint_path))
    return 0


def cmd_eval(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise NotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    data = load_cached_dataset(args.data)
    frames = range(args.frames) if args.frames else None
    ratios = evaluate(model, data, frames=frames)
    _say(r5=repr(float(ratios[0])), r10=repr(float(ratios[1])),
         r20=repr(float(ratios[2])))
    if args.out:
        row = MetricsRow(epoch=0, split="eval", r5=float(ratios[0]),
                         r10=float(ratios[1]), r20=float(ratios[2]))
        _write(args.out, metrics_to_csv([row]))
        _say(metrics=args.out, metrics_sha256=_sha256(args.out))
    return 0


def cmd_propagate(args) -> int:
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    if args.threshold < 0:
        raise UsageError("--threshold must be non-negative")
    data = load_cached_dataset(args.data)
    noise = None
    rng = None
    if args.flow == "corrupted":
        noise = {"sigma": args.noise_sigma,
                 "outlier_frac": args.outlier_frac,
                 "outlier_mag": args.outlier_mag}
        seed = _pick_seed(args.seed)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed if seed is not None else 0,
                                    _PROP_SEED_TAG])))
    augmented, stats = propagate_dataset(
        data.sequence, data.annotations, window=args.window,
        threshold=args.threshold, rng=rng, noise=noise)
    out_ds = dataclasses.replace(data, annotations=augmented)
    digest = save_dataset(out_ds, args.out, force=args.force)
    _say(out=args.out, attempted=stats["attempted"], kept=stats["kept"],
         survival=repr(float(stats["survival"])), digest=digest)
    return 0


def cmd_ablate(args) -> int:
    config = _runconfig(args)
    _checked(config)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--seeds wants comma-separated integers, "
                         f"got {args.seeds!r}")
    if not seeds:
        raise UsageError("--seeds must name at least one seed")

    root = args.out
    os.makedirs(root, exist_ok=True)
    data_dir = os.path.join(root, "datasets")
    train_path = args.data or ensure_dataset(
        config.data, os.path.join(data_dir, "train"))
    eval_cfg = dataclasses.replace(config.data, seed=config.data.seed + 2,
                                   length=min(config.data.length, 8))
    eval_path = args.eval_data or ensure_dataset(
        eval_cfg, os.path.join(data_dir, "eval"))
    stage2_path = args.stage2_data
    if stage2_path is None and args.kind == "strategy":
        hard_cfg = dataclasses.replace(config.data,
                                       seed=config.data.seed + 1,
                                       motion=config.data.motion * 2.0)
        stage2_path = ensure_dataset(hard_cfg,
                                     os.path.join(data_dir, "train_hard"))

    base = ExperimentSpec(name="base", train_path=train_path,
                          eval_path=eval_path, stage2_path=stage2_path,
                          model=config.model, train=config.train,
                          seeds=seeds, grid=args.kind)
    table = ablation_grid(args.kind, base, root)

    summary_path = os.path.join(root, "summary.csv")
    cells_path = os.path.join(root, "cells.csv")
    if os.path.isfile(summary_path):
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary_text = fh.read()
        cells_text = None
        if os.path.isfile(cells_path):
            with open(cells_path, "r", encoding="utf-8") as fh:
                cells_text = fh.read()
        table = parse_result_csv(summary_text, cells_text).merge(table)
    written = emit_report(table, "csv", root)
    written += emit_report(table, "text", root)
    _say(cells=len(table.cells), rows=len(table.rows),
         summary=summary_path, summary_sha256=_sha256(summary_path))
    for path in written:
        _say(wrote=path)
    return 0


def cmd_plot(args) -> int:
    summary_path = os.path.join(args.results, "summary.csv")
    if not os.path.isfile(summary_path):
        raise NotFoundError(f"summary not found: {summary_path}")
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary_text = fh.read()
    cells_path = os.path.join(args.results, "cells.csv")
    cells_text = None
    if os.path.isfile(cells_path):
        with open(cells_path, "r", encoding="utf-8") as fh:
            cells_text = fh.read()
    try:
        table = parse_result_csv(summary_text, cells_text)
    except ValueError as exc:
        raise DataFormatError(f"{summary_path}: {exc}") from None
    out_dir = args.out or args.results
    for path in emit_report(table, "svg", out_dir):
        _say(wrote=path)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sub, config_required=False):
    sub.add_argument("--config", required=config_required,
                     help="run configuration file")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override one config key (repeatable)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqmap",
        description="surface-coordinate prediction on a rendered puppet "
                    "benchmark: data generation, training, evaluation, "
                    "label propagation, and ablation grids")
    commands = parser.add_subparsers(dest="cmd", required=True)

    gen = commands.add_parser("gen-data", help="render a sequence dataset")
    _add_common(gen, config_required=True)
    gen.add_argument("--out", required=True, help="dataset directory")
    gen.add_argument("--seed", type=int, help="dataset seed")
    gen.add_argument("--force", action="store_true",
                     help="overwrite a non-empty output directory")
    gen.set_defaults(func=cmd_gen_data)

    tr = commands.add_parser("train", help="train one model")
    _add_common(tr)
    tr.add_argument("--data", required=True, help="training dataset")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--strategy", choices=STRATEGIES,
                    help="override the training strategy")
    tr.add_argument("--stage2-data", help="second-stage dataset")
    tr.add_argument("--eval-data", help="dataset for periodic eval rows")
    tr.add_argument("--seed", type=int, help="training seed")
    tr.add_argument("--workers", type=int, default=1,
                    help="worker count; execution is single-process either "
                         "way, so results are identical for any value")
    tr.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="score a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="evaluation dataset")
    ev.add_argument("--out", help="also write the ratios as a CSV")
    ev.add_argument("--frames", type=int, default=0,
                    help="score only the first N frames (0 = all)")
    ev.set_defaults(func=cmd_eval)

    pr = commands.add_parser("propagate",
                             help="spread clicks to neighboring frames")
    pr.add_argument("--data", required=True, help="source dataset")
    pr.add_argument("--out", required=True, help="augmented dataset directory")
    pr.add_argument("--window", type=int, default=3,
                    help="frame reach in each direction")
    pr.add_argument("--threshold", type=float, default=5.0,
                    help="round-trip rejection threshold in pixels")
    pr.add_argument("--flow", choices=("clean", "corrupted"), default="clean",
                    help="transport on exact fields or corrupted flow")
    pr.add_argument("--seed", type=int, help="corruption seed")
    pr.add_argument("--noise-sigma", type=float, default=0.5)
    pr.add_argument("--outlier-frac", type=float, default=0.02)
    pr.add_argument("--outlier-mag", type=float, default=10.0)
    pr.add_argument("--force", action="store_true",
                    help="overwrite a non-empty output directory")
    pr.set_defaults(func=cmd_propagate)

    ab = commands.add_parser("ablate", help="run one ablation grid")
    _add_common(ab)
    ab.add_argument("--kind", required=True, choices=GRID_KINDS)
    ab.add_argument("--out", required=True, help="results root")
    ab.add_argument("--data", help="stage-one dataset (default: generated)")
    ab.add_argument("--stage2-data",
                    help="stage-two dataset (default: generated for the "
                         "strategy grid)")
    ab.add_argument("--eval-data", help="eval dataset (default: generated)")
    ab.add_argument("--seeds", default="0,1,2,3,4",
                    help="comma-separated seed list")
    ab.add_argument("--workers", type=int, default=1,
                    help="worker count; cells run serially either way")
    ab.set_defaults(func=cmd_ablate)

    pl = commands.add_parser("plot", help="render SVG plots from a summary")
    pl.add_argument("--results", required=True,
                    help="results root holding summary.csv")
    pl.add_argument("--out", help="plot output root (default: results root)")
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args) or 0
    except UsageError as exc:
        return _fail(2, "usage", exc)
    except NotFoundError as exc:
        return _fail(3, "not-found", exc)
    except DataFormatError as exc:
        return _fail(4, "data-format", exc)
    except NumericFailure as exc:
        detail = " ".join(f"{k}={v}"
                          for k, v in sorted(exc.diagnostics.items()))
        return _fail(5, "numeric", f"{exc} {detail}".rstrip())
    except FileNotFoundError as exc:
        return _fail(3, "not-found", exc)
    except ValueError as exc:
        return _fail(4, "invalid", exc)
    except OSError as exc:
        return _fail(1, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
