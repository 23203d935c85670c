"""Experiment grids over supervision budgets, strategies, and levels.

A grid cell is (name, training config, datasets, seed list). Each
(cell, seed) run owns one directory under the results root and leaves a
marker once finished, so reruns skip completed work and change no
bytes. Cell aggregates are always recomputed from the per-seed rows.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os

import numpy as np

from .datasetio import GenConfig, build_dataset, load_dataset, save_dataset
from .errors import NotFoundError, UsageError
from .model import Model, ModelConfig, save_model
from .runconfig import RunConfig, save_config
from .training import (MetricsRow, TrainConfig, evaluate, metrics_to_csv,
                       parse_metrics_csv, train)

__all__ = [
    "CellInfo",
    "ExperimentSpec",
    "ResultRow",
    "ResultTable",
    "ensure_dataset",
    "load_cached_dataset",
    "run_experiment",
    "grid_specs",
    "ablation_grid",
    "emit_report",
    "table_to_csv",
    "aggregates_to_csv",
    "cells_to_csv",
    "parse_result_csv",
    "GRID_KINDS",
]

GRID_KINDS = ("budget", "strategy", "level")
MARKER_NAME = "done.txt"
_MODEL_SEED_TAG = 0x0DE1


# ---------------------------------------------------------------------------
# result tables


@dataclasses.dataclass
class ResultRow:
    experiment: str
    seed: int
    r5: float
    r10: float
    r20: float


@dataclasses.dataclass
class CellInfo:
    grid: str
    label: str
    tag: str                        # "benchmark" | "extension"


@dataclasses.dataclass
class ResultTable:
    rows: list = dataclasses.field(default_factory=list)
    cells: dict = dataclasses.field(default_factory=dict)  # name -> CellInfo

    def check(self) -> "ResultTable":
        for row in self.rows:
            for value in (row.r5, row.r10, row.r20):
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"ratio out of [0,1] in {row.experiment}")
        return self

    def experiments(self) -> list:
        seen = []
        for row in self.rows:
            if row.experiment not in seen:
                seen.append(row.experiment)
        return seen

    def rows_for(self, name: str) -> list:
        return [r for r in self.rows if r.experiment == name]

    def metric(self, name: str, which: str = "r5") -> np.ndarray:
        return np.array([getattr(r, which) for r in self.rows_for(name)])

    def aggregates(self) -> list:
        """Per experiment: (name, n, mean and std of each ratio)."""
        out = []
        for name in self.experiments():
            entry = {"experiment": name, "n": len(self.rows_for(name))}
            for which in ("r5", "r10", "r20"):
                vals = self.metric(name, which)
                entry[f"{which}_mean"] = float(vals.mean())
                entry[f"{which}_std"] = (float(vals.std(ddof=1))
                                         if vals.size > 1 else 0.0)
            out.append(entry)
        return out

    def merge(self, other: "ResultTable") -> "ResultTable":
        """Rows of `other` replace same-(experiment, seed) rows in place."""
        keyed = {(r.experiment, r.seed): i for i, r in enumerate(self.rows)}
        rows = list(self.rows)
        for row in other.rows:
            key = (row.experiment, row.seed)
            if key in keyed:
                rows[keyed[key]] = row
            else:
                keyed[key] = len(rows)
                rows.append(row)
        cells = dict(self.cells)
        cells.update(other.cells)
        return ResultTable(rows=rows, cells=cells)


def table_to_csv(table: ResultTable) -> str:
    lines = ["experiment,seed,r5,r10,r20"]
    for r in table.rows:
        lines.append(f"{r.experiment},{r.seed},{r.r5!r},{r.r10!r},{r.r20!r}")
    return "\n".join(lines) + "\n"


def aggregates_to_csv(table: ResultTable) -> str:
    cols = ["experiment", "n", "r5_mean", "r5_std", "r10_mean", "r10_std",
            "r20_mean", "r20_std"]
    lines = [",".join(cols)]
    for agg in table.aggregates():
        cells = [agg["experiment"], str(agg["n"])]
        cells += [repr(agg[c]) for c in cols[2:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cells_to_csv(table: ResultTable) -> str:
    lines = ["cell,grid,label,tag"]
    for name, info in table.cells.items():
        for field in (name, info.grid, info.label, info.tag):
            if "," in field:
                raise ValueError(f"comma in cell metadata: {field!r}")
        lines.append(f"{name},{info.grid},{info.label},{info.tag}")
    return "\n".join(lines) + "\n"


def parse_result_csv(text: str, cells_text: str | None = None) -> ResultTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "experiment,seed,r5,r10,r20":
        raise ValueError("bad results header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"bad results row: {line!r}")
        rows.append(ResultRow(parts[0], int(parts[1]), float(parts[2]),
                              float(parts[3]), float(parts[4])))
    cells = {}
    if cells_text is not None:
        clines = [ln for ln in cells_text.splitlines() if ln.strip()]
        if not clines or clines[0] != "cell,grid,label,tag":
            raise ValueError("bad cells header")
        for line in clines[1:]:
            name, grid, label, tag = line.split(",")
            cells[name] = CellInfo(grid, label, tag)
    return ResultTable(rows=rows, cells=cells)


# ---------------------------------------------------------------------------
# datasets


_DATASET_CACHE = {}


def ensure_dataset(config: GenConfig, path) -> str:
    """Build and save the dataset at `path` unless already there."""
    path = os.fspath(path)
    if not os.path.isfile(os.path.join(path, "manifest.txt")):
        save_dataset(build_dataset(config), path, force=True)
    return path


def load_cached_dataset(path):
    key = os.path.abspath(os.fspath(path))
    if key not in _DATASET_CACHE:
        if not os.path.isfile(os.path.join(key, "manifest.txt")):
            raise NotFoundError(f"dataset not found: {path}")
        _DATASET_CACHE[key] = load_dataset(key)
    return _DATASET_CACHE[key]


# ---------------------------------------------------------------------------
# one experiment


@dataclasses.dataclass
class ExperimentSpec:
    name: str
    train_path: str                 # first-stage dataset directory
    eval_path: str                  # held-out rendered split
    stage2_path: str | None = None
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    grid: str = "single"
    label: str = ""
    tag: str = "benchmark"

    def check(self) -> "ExperimentSpec":
        if not self.name:
            raise ValueError("experiment name must be non-empty")
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        self.train.check()
        return self


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _cell_dir(root, spec: ExperimentSpec, seed: int) -> str:
    return os.path.join(os.fspath(root), spec.grid, spec.name, str(seed))


def _final_row(rows) -> MetricsRow:
    finals = [r for r in rows if r.split == "final"]
    if not finals:
        raise ValueError("metrics log carries no final row")
    return finals[-1]


def _run_seed(spec: ExperimentSpec, seed: int, root) -> ResultRow:
    cell = _cell_dir(root, spec, seed)
    marker = os.path.join(cell, MARKER_NAME)
    metrics_path = os.path.join(cell, "metrics.csv")
    if os.path.isfile(marker):
        with open(metrics_path, "r", encoding="utf-8") as fh:
            final = _final_row(parse_metrics_csv(fh.read()))
        return ResultRow(spec.name, seed, final.r5, final.r10, final.r20)

    data = load_cached_dataset(spec.train_path)
    stage2 = (load_cached_dataset(spec.stage2_path)
              if spec.stage2_path else None)
    eval_data = load_cached_dataset(spec.eval_path)
    config = dataclasses.replace(spec.train, seed=seed, ann_seed=seed)
    model = Model.init(spec.model, np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _MODEL_SEED_TAG]))))
    model, rows = train(model, config, data, stage2,
                        eval_data if config.eval_every > 0 else None)
    ratios = evaluate(model, eval_data)
    total = config.epochs + (config.stage2_epochs if stage2 is not None else 0)
    rows.append(MetricsRow(epoch=total, split="final", r5=float(ratios[0]),
                           r10=float(ratios[1]), r20=float(ratios[2])))

    os.makedirs(cell, exist_ok=True)
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_to_csv(rows))
    checkpoint_path = os.path.join(cell, "checkpoint.eqmp")
    save_model(checkpoint_path, model)
    config_path = os.path.join(cell, "config.txt")
    save_config(RunConfig(data=data.config, model=spec.model, train=config),
                config_path)
    with open(marker, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"metrics_sha256={_sha256(metrics_path)}\n"
                 f"checkpoint_sha256={_sha256(checkpoint_path)}\n"
                 f"config_sha256={_sha256(config_path)}\n")
    return ResultRow(spec.name, seed,
                     float(ratios[0]), float(ratios[1]), float(ratios[2]))


def run_experiment(spec: ExperimentSpec, root) -> ResultTable:
    """Train and score every seed of one cell; completed seeds are read back."""
    spec.check()
    rows = [_run_seed(spec, seed, root) for seed in spec.seeds]
    info = CellInfo(spec.grid, spec.label or spec.name, spec.tag)
    return ResultTable(rows=rows, cells={spec.name: info}).check()


# ---------------------------------------------------------------------------
# grids


BUDGET_STEPS = ((1.0, "100"), (0.5, "50"), (0.05, "5"), (0.01, "1"))
BUDGET_SCHEMES = (("image", "image_frac", "frames fully labeled"),
                  ("imagek", "image_frac_k_only",
                   "frames with coordinates, charts everywhere"),
                  ("point", "point_frac", "clicks kept"))
STRATEGY_SHORT = {"baseline": "base", "gtprop": "gtprop", "equiv": "equiv",
                  "gtprop+equiv": "both"}
SOURCE_SHORT = {"synthetic": "synth", "real": "real"}
LEVEL_CELLS = ("0", "1", "2", "3", "4-all", "4-segm", "4-uv", "none")


def _cell(base: ExperimentSpec, grid: str, name: str, label: str, tag: str,
          **train_overrides) -> ExperimentSpec:
    return dataclasses.replace(
        base, grid=grid, name=name, label=label, tag=tag,
        train=dataclasses.replace(base.train, **train_overrides))


def _budget_specs(base: ExperimentSpec) -> list:
    specs = []
    for short, scheme, desc in BUDGET_SCHEMES:
        for fraction, pct in BUDGET_STEPS:
            for kp in (False, True):
                name = f"{short}_{pct}" + ("_kp" if kp else "")
                label = f"{pct}% {desc}" + (" + keypoints" if kp else "")
                tag = ("benchmark" if not kp or pct in ("100", "1")
                       else "extension")
                specs.append(_cell(base, "budget", name, label, tag,
                                   ann_scheme=scheme, ann_fraction=fraction,
                                   ann_keypoints="on" if kp else "off"))
    specs.append(_cell(base, "budget", "seg_only", "charts only, everywhere",
                       "benchmark", ann_scheme="seg_only", ann_fraction=1.0,
                       ann_keypoints="off"))
    return specs


def _strategy_specs(base: ExperimentSpec) -> list:
    if not base.stage2_path:
        raise UsageError("the strategy grid needs a second-stage dataset")
    stage2_epochs = base.train.stage2_epochs
    if stage2_epochs <= 0:
        stage2_epochs = max(1, base.train.epochs // 2)
    specs = []
    for strategy, s_short in STRATEGY_SHORT.items():
        for source, f_short in SOURCE_SHORT.items():
            for staged in (False, True):
                name = f"{s_short}_{f_short}" + ("_curr" if staged
                                                 else "_scratch")
                label = (f"{strategy}, {source} pairs, "
                         + ("two-stage" if staged else "from scratch"))
                spec = _cell(base, "strategy", name, label, "benchmark",
                             strategy=strategy, source=source,
                             stage2_epochs=stage2_epochs if staged else 0)
                if not staged:
                    spec = dataclasses.replace(spec, stage2_path=None)
                specs.append(spec)
    for source, f_short in SOURCE_SHORT.items():
        name = f"both_{f_short}_curr_all"
        label = f"gtprop+equiv, {source} pairs, full labels in stage two"
        spec = _cell(base, "strategy", name, label, "benchmark",
                     strategy="gtprop+equiv", source=source,
                     stage2_epochs=stage2_epochs, stage2_scheme="full")
        specs.append(spec)
    return specs


def _level_specs(base: ExperimentSpec) -> list:
    specs = []
    for sel in LEVEL_CELLS:
        if sel == "none":
            specs.append(_cell(base, "level", "none", "no consistency loss",
                               "benchmark", strategy="baseline", level="none"))
        else:
            specs.append(_cell(base, "level", sel,
                               f"consistency tap at level {sel}", "benchmark",
                               strategy="equiv", level=sel))
    return specs


def grid_specs(kind: str, base: ExperimentSpec) -> list:
    """Expand a base spec into the cells of one ablation grid."""
    if kind == "budget":
        return _budget_specs(base)
    if kind == "strategy":
        return _strategy_specs(base)
    if kind == "level":
        return _level_specs(base)
    raise UsageError(f"unknown grid kind {kind!r}; "
                     f"valid: {', '.join(GRID_KINDS)}")


def ablation_grid(kind: str, base: ExperimentSpec, root) -> ResultTable:
    """Run every cell of a grid; finished (cell, seed) pairs are reused."""
    table = ResultTable()
    for spec in grid_specs(kind, base):
        table = table.merge(run_experiment(spec, root))
    return table


# ---------------------------------------------------------------------------
# reports


_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf", "#e377c2")


def _svg_open(width: int, height: int, title: str) -> list:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="22" font-size="15" '
            f'text-anchor="middle">{title}</text>']


def _budget_svg(table: ResultTable, names: list, title: str) -> str:
    # series keyed by scheme variant, x = kept fraction in percent
    series = {}
    for name in names:
        parts = name.split("_")
        if len(parts) < 2 or not parts[1].isdigit():
            continue                # seg_only and friends have no budget axis
        key = parts[0] + ("+kp" if parts[-1] == "kp" else "")
        agg = [a for a in table.aggregates() if a["experiment"] == name][0]
        series.setdefault(key, []).append((float(parts[1]), agg["r5_mean"]))
    width, height = 640, 420
    x0, y0, x1, y1 = 70.0, 40.0, 480.0, 380.0
    out = _svg_open(width, height, title)

    def xpos(pct):
        return x0 + (np.log10(pct) - 0.0) / 2.0 * (x1 - x0)

    def ypos(v):
        return y1 - v * (y1 - y0)

    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = ypos(tick)
        out.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{x1}" y2="{y:.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" font-size="11" '
                   f'text-anchor="end">{tick:g}</text>')
    for pct in (1, 5, 50, 100):
        x = xpos(pct)
        out.append(f'<line x1="{x:.1f}" y1="{y1}" x2="{x:.1f}" y2="{y1 + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{y1 + 18}" font-size="11" '
                   f'text-anchor="middle">{pct}</text>')
    out.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" '
               f'height="{y1 - y0}" fill="none" stroke="black"/>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{y1 + 34}" font-size="12" '
               f'text-anchor="middle">kept budget, percent</text>')
    for i, (key, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{xpos(p):.1f},{ypos(v):.1f}" for p, v in pts)
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        for p, v in pts:
            out.append(f'<circle cx="{xpos(p):.1f}" cy="{ypos(v):.1f}" '
                       f'r="3" fill="{color}"/>')
        ly = 50 + 18 * i
        out.append(f'<line x1="495" y1="{ly}" x2="520" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="526" y="{ly + 4}" font-size="11">{key}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _bars_svg(table: ResultTable, names: list, title: str) -> str:
    aggs = {a["experiment"]: a for a in table.aggregates()}
    row_h = 24
    width = 640
    top = 40
    height = top + row_h * len(names) + 40
    x0, x1 = 190.0, 600.0
    out = _svg_open(width, height, title)
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = x0 + tick * (x1 - x0)
        out.append(f'<line x1="{x:.1f}" y1="{top}" x2="{x:.1f}" '
                   f'y2="{top + row_h * len(names)}" stroke="#dddddd"/>')
        out.append(f'<text x="{x:.1f}" y="{top + row_h * len(names) + 16}" '
                   f'font-size="11" text-anchor="middle">{tick:g}</text>')
    for i, name in enumerate(names):
        agg = aggs[name]
        y = top + row_h * i
        mean, std = agg["r5_mean"], agg["r5_std"]
        bar_w = mean * (x1 - x0)
        out.append(f'<text x="{x0 - 8}" y="{y + 16}" font-size="11" '
                   f'text-anchor="end">{name}</text>')
        out.append(f'<rect x="{x0}" y="{y + 4}" width="{bar_w:.1f}" '
                   f'height="14" fill="{_PALETTE[1]}"/>')
        lo = x0 + max(mean - std, 0.0) * (x1 - x0)
        hi = x0 + min(mean + std, 1.0) * (x1 - x0)
        out.append(f'<line x1="{lo:.1f}" y1="{y + 11}" x2="{hi:.1f}" '
                   f'y2="{y + 11}" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _grid_svg(table: ResultTable, grid: str, names: list) -> str:
    title = f"hit ratio at 5 units, {grid} grid"
    if grid == "budget":
        return _budget_svg(table, names, title)
    return _bars_svg(table, names, title)


def _text_report(table: ResultTable) -> str:
    aggs = table.aggregates()
    headers = ("experiment", "n", "r@5", "r@10", "r@20")
    lines = []
    rows = []
    for agg in aggs:
        rows.append((agg["experiment"], str(agg["n"]),
                     f"{agg['r5_mean']:.4f} ± {agg['r5_std']:.4f}",
                     f"{agg['r10_mean']:.4f} ± {agg['r10_std']:.4f}",
                     f"{agg['r20_mean']:.4f} ± {agg['r20_std']:.4f}"))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)))
    return "\n".join(lines) + "\n"


def emit_report(table: ResultTable, fmt: str, out_dir) -> list:
    """Write the table as csv, text, or svg files; returns written paths."""
    if not table.rows:
        raise UsageError("empty result table")
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(rel, content):
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)
        written.append(path)

    if fmt == "csv":
        put("summary.csv", table_to_csv(table))
        put("aggregates.csv", aggregates_to_csv(table))
        put("cells.csv", cells_to_csv(table))
    elif fmt == "text":
        put("summary.txt", _text_report(table))
    elif fmt == "svg":
        grids = {}
        for name in table.experiments():
            info = table.cells.get(name, CellInfo("single", name, "extension"))
            grids.setdefault(info.grid, []).append(name)
        for grid, names in sorted(grids.items()):
            put(os.path.join("plots", f"{grid}.svg"),
                _grid_svg(table, grid, names))
    else:
        raise UsageError(f"unknown report format {fmt!r}; "
                         f"valid: csv, text, svg")
    return written
