"""Mini-batch training over the four supervision strategies.

baseline        supervised terms only (clicks, masks, keypoints)
gtprop          + labels transported onto a second view of each frame
equiv           + feature-consistency between the two views
gtprop+equiv    both extras

The second view comes from `source`: "synthetic" warps the frame with a
random thin-plate warp; "real" pairs it with a nearby frame through
integrated (optionally corrupted) flow plus a round-trip mask. Stage II
data, when given, is mixed into the batch pool uniformly for the last
`stage2_epochs` epochs. Single-threaded and deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import nn
from .annotations import (SCHEMES, FrameAnnotation, propagate_clicks,
                          subsample_annotations)
from .datasetio import Dataset
from .errors import NumericFailure
from .fields import (ConsistencyMask, WarpPolicy, forward_backward_mask,
                     integrate_flow, invert_field, realize_warp, sample_warp,
                     warp_image)
from .losses import (LossWeights, loss_equivariance, loss_keypoints,
                     supervised_terms)
from .model import LevelSelector, Model
from .sequences import corrupt_flow
from .surface import DEFAULT_THRESHOLDS, ratio_within

__all__ = [
    "STRATEGIES",
    "SOURCES",
    "TrainConfig",
    "MetricsRow",
    "metrics_to_csv",
    "parse_metrics_csv",
    "train",
    "evaluate",
]

STRATEGIES = ("baseline", "gtprop", "equiv", "gtprop+equiv")
SOURCES = ("synthetic", "real")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    stage2_epochs: int = 0
    batch: int = 3
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_every: int = 0         # epochs between decays; 0 = constant
    lr_decay_factor: float = 0.5
    grad_clip: float = 10.0         # global-norm bound; 0 disables
    strategy: str = "baseline"
    source: str = "synthetic"
    level: str = "3"                # equivariance placement
    window: int = 3                 # real-pair frame gap bound
    fb_threshold: float = 5.0
    noise_sigma: float = 0.5
    noise_outlier_frac: float = 0.02
    noise_outlier_mag: float = 10.0
    warp_grid: int = 3
    warp_min_disp: float = 0.0
    warp_max_disp: float = 5.0
    chart_weight: float = 1.0
    uv_weight: float = 1.0
    keypoint_weight: float = 1.0
    equiv_weight: float = 0.1
    prop_weight: float = 1.0
    ann_scheme: str = "full"
    ann_fraction: float = 1.0
    ann_seed: int = 0
    ann_keypoints: str = "auto"     # auto | on | off
    stage2_scheme: str = "same"     # scheme for the Stage II pool
    stage2_fraction: float = 0.0    # 0 = reuse ann_fraction
    eval_every: int = 0             # epochs between eval rows; 0 = final only
    eval_frames: int = 4

    def check(self) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; "
                             f"valid: {', '.join(STRATEGIES)}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown pair source {self.source!r}; "
                             f"valid: {', '.join(SOURCES)}")
        if self.ann_keypoints not in ("auto", "on", "off"):
            raise ValueError("ann_keypoints must be auto, on, or off")
        if self.stage2_scheme != "same" and self.stage2_scheme not in SCHEMES:
            raise ValueError(f"unknown stage2 scheme {self.stage2_scheme!r}")
        if self.epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if not (1 <= self.window <= 3):
            raise ValueError("window must be 1..3")
        selector = LevelSelector.parse(self.level)
        if "equiv" in self.strategy and self.equiv_weight > 0 \
                and selector.level is None:
            raise ValueError("equivariance strategy needs a feature level")
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(chart=self.chart_weight, uv=self.uv_weight,
                           keypoint=self.keypoint_weight,
                           equivariance=self.equiv_weight,
                           propagated=self.prop_weight)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    r5: float | None = None
    r10: float | None = None
    r20: float | None = None
    loss_total: float | None = None
    loss_chart: float | None = None
    loss_uv: float | None = None
    loss_keypoint: float | None = None
    loss_equiv: float | None = None


_METRIC_COLS = [f.name for f in dc_fields(MetricsRow)]


def metrics_to_csv(rows) -> str:
    out = [",".join(_METRIC_COLS)]
    for r in rows:
        cells = []
        for name in _METRIC_COLS:
            v = getattr(r, name)
            if v is None:
                cells.append("")
            elif isinstance(v, str):
                cells.append(v)
            elif name == "epoch":
                cells.append(str(int(v)))
            else:
                cells.append(repr(float(v)))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def parse_metrics_csv(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ",".join(_METRIC_COLS):
        raise ValueError("bad metrics header")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        kw = {}
        for name, cell in zip(_METRIC_COLS, cells):
            if cell == "":
                kw[name] = None
            elif name == "epoch":
                kw[name] = int(cell)
            elif name == "split":
                kw[name] = cell
            else:
                kw[name] = float(cell)
        rows.append(MetricsRow(**kw))
    return rows


def evaluate(model: Model, data: Dataset, frames=None,
             thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Geodesic hit ratios of decoded predictions against dense truth."""
    if model.config.charts != data.charts:
        raise ValueError(f"model predicts {model.config.charts} charts, "
                         f"dataset has {data.charts}")
    if frames is None:
        frames = range(len(data.sequence.frames))
    pk, pu, tk, tu = [], [], [], []
    for idx in frames:
        frame = data.sequence.frames[idx]
        decoded = model.predict(frame.image)
        fg = frame.part_mask > 0
        pk.append(decoded.chart[fg])
        pu.append(decoded.u[fg])
        tk.append(frame.part_mask[fg])
        tu.append(frame.gt_uv.u[fg])
    return ratio_within(data.geodesic_index,
                        (np.concatenate(pk), np.concatenate(pu)),
                        (np.concatenate(tk), np.concatenate(tu)),
                        thresholds)


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class _Pool:
    """One training frame: its dataset plus the annotations in force."""
    data: Dataset
    index: int
    ann: FrameAnnotation | None


def _build_pool(data: Dataset, config: TrainConfig) -> list:
    keep = {"auto": None, "on": True, "off": False}[config.ann_keypoints]
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.ann_seed, 0xA11])))
    ann = subsample_annotations(data.annotations, config.ann_scheme,
                                config.ann_fraction, rng, keep_keypoints=keep)
    pool = [_Pool(data, idx, fr) for idx, fr in sorted(ann.frames.items())
            if not fr.empty]
    if not pool:
        # nothing labeled: consistency-only training still needs frames
        pool = [_Pool(data, idx, None)
                for idx in range(len(data.sequence.frames))]
    return pool


def _noise_params(config: TrainConfig) -> dict | None:
    if config.noise_sigma <= 0 and config.noise_outlier_frac <= 0:
        return None
    return {"sigma": config.noise_sigma,
            "outlier_frac": config.noise_outlier_frac,
            "outlier_mag": config.noise_outlier_mag}


def _integrate_steps(frames, start, stop, rng, noise):
    step = 1 if stop > start else -1
    chain = []
    for t in range(start, stop, step):
        flow = frames[t].flow_next if step == 1 else frames[t].flow_prev
        if noise is not None:
            flow = corrupt_flow(flow, rng, **noise)
        chain.append(flow)
    chain.reverse()
    return integrate_flow(chain)


def _make_pair(item: _Pool, config: TrainConfig, policy: WarpPolicy,
               rng: np.random.Generator):
    """Second view of a pool frame: (image_b, field a->b, mask on a)."""
    frame = item.data.sequence.frames[item.index]
    if config.source == "synthetic":
        h, w = frame.image.shape
        realized = realize_warp(sample_warp(rng, policy), w, h)
        image_b = warp_image(frame.image, realized, boundary="clamp")
        g = invert_field(realized)
        mask = ConsistencyMask(np.ones((h, w), dtype=bool), np.inf)
        return image_b, g, mask
    n = len(item.data.sequence.frames)
    noise = _noise_params(config)
    w_gap = int(rng.integers(1, config.window + 1))
    candidates = [s for s in (+1, -1) if 0 <= item.index + s * w_gap < n]
    if not candidates:
        raise ValueError("sequence too short for the configured window")
    sign = candidates[int(rng.integers(0, len(candidates)))]
    other = item.index + sign * w_gap
    fwd = _integrate_steps(item.data.sequence.frames, item.index, other,
                           rng, noise)
    bwd = _integrate_steps(item.data.sequence.frames, other, item.index,
                           rng, noise)
    mask = forward_backward_mask(fwd, bwd, config.fb_threshold)
    return item.data.sequence.frames[other].image, fwd, mask


# ---------------------------------------------------------------------------
# the loop


def train(model: Model, config: TrainConfig, data: Dataset,
          stage2: Dataset | None = None, eval_data: Dataset | None = None):
    """Train in place; returns (model, metric rows).

    Zero total epochs returns the model untouched with an empty log.
    Non-finite losses abort with diagnostics (epoch, step, term values).
    """
    config.check()
    if model.config.charts != data.charts:
        raise ValueError(f"model predicts {model.config.charts} charts, "
                         f"dataset has {data.charts}")
    selector = LevelSelector.parse(config.level)
    weights = config.loss_weights()
    use_prop = config.strategy in ("gtprop", "gtprop+equiv")
    use_equiv = (config.strategy in ("equiv", "gtprop+equiv")
                 and config.equiv_weight > 0 and selector.level is not None)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, 0x7EA1])))
    policy = WarpPolicy(width=data.resolution, height=data.resolution,
                        kind="tps", grid_rows=config.warp_grid,
                        grid_cols=config.warp_grid,
                        min_displacement=config.warp_min_disp,
                        max_displacement=config.warp_max_disp)
    pool1 = _build_pool(data, config)
    if stage2 is None:
        pool2 = pool1
    else:
        cfg2 = config
        if config.stage2_scheme != "same":
            cfg2 = replace(cfg2, ann_scheme=config.stage2_scheme)
        if config.stage2_fraction > 0:
            cfg2 = replace(cfg2, ann_fraction=config.stage2_fraction)
        pool2 = pool1 + _build_pool(stage2, cfg2)
    velocity = np.zeros_like(model.params)
    rows = []
    total_epochs = config.epochs + (config.stage2_epochs if stage2 is not None
                                    else 0)
    for epoch in range(total_epochs):
        pool = pool1 if epoch < config.epochs else pool2
        lr = config.lr
        if config.lr_decay_every > 0:
            lr *= config.lr_decay_factor ** (epoch // config.lr_decay_every)
        order = rng.permutation(len(pool))
        sums = {"loss_total": 0.0, "loss_chart": 0.0, "loss_uv": 0.0,
                "loss_keypoint": 0.0, "loss_equiv": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch):
            items = [pool[i] for i in order[start:start + config.batch]]
            images_a = np.stack([it.data.sequence.frames[it.index].image
                                 for it in items])
            anns_a = [it.ann for it in items]
            leaves = model.make_leaves()
            pred_a = model.forward(images_a, leaves)
            ce_a, uv_a = supervised_terms(pred_a, anns_a, weights.propagated)
            ce_nodes, uv_nodes = [ce_a], [uv_a]
            kp_node = nn.Node(0.0)
            if any(it.ann is not None and it.ann.keypoints is not None
                   for it in items):
                kp_node = loss_keypoints(
                    pred_a,
                    [None if it.ann is None else it.ann.keypoints
                     for it in items],
                    data.kp_chart, data.kp_u, weights)
            eq_node = nn.Node(0.0)
            if use_prop or use_equiv:
                pairs = [_make_pair(it, config, policy, rng) for it in items]
                images_b = np.stack([p[0] for p in pairs])
                pred_b = model.forward(images_b, leaves)
                if use_prop:
                    anns_b = []
                    for it, (image_b, g, mask) in zip(items, pairs):
                        clicks = [] if it.ann is None else it.ann.clicks
                        anns_b.append(FrameAnnotation(
                            clicks=propagate_clicks(clicks, g, mask)))
                    ce_b, uv_b = supervised_terms(pred_b, anns_b,
                                                  weights.propagated)
                    ce_nodes.append(ce_b)
                    uv_nodes.append(uv_b)
                if use_equiv:
                    eq_node = loss_equivariance(pred_a, pred_b,
                                                [p[1] for p in pairs],
                                                [p[2] for p in pairs],
                                                selector)
            terms = [(n, weights.chart) for n in ce_nodes]
            terms += [(n, weights.uv) for n in uv_nodes]
            terms.append((kp_node, weights.keypoint))
            terms.append((eq_node, weights.equivariance))
            total = nn.add_weighted(terms)
            term_values = {
                "loss_total": float(total.value),
                "loss_chart": float(sum(n.value for n in ce_nodes)),
                "loss_uv": float(sum(n.value for n in uv_nodes)),
                "loss_keypoint": float(kp_node.value),
                "loss_equiv": float(eq_node.value),
            }
            if not np.isfinite(total.value):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch} step {n_batches}",
                    diagnostics={"epoch": epoch, "step": n_batches,
                                 **term_values})
            grads = nn.backward(total)
            flat = model.collect_grads(leaves, grads)
            if config.grad_clip > 0:
                norm = float(np.linalg.norm(flat))
                if norm > config.grad_clip:
                    flat = flat * (config.grad_clip / norm)
            velocity = config.momentum * velocity - lr * flat
            model.params += velocity
            for key, value in term_values.items():
                sums[key] += value
            n_batches += 1
        means = {k: (v / n_batches if n_batches else 0.0)
                 for k, v in sums.items()}
        rows.append(MetricsRow(epoch=epoch, split="train", **means))
        last = epoch == total_epochs - 1
        if eval_data is not None and (last or (
                config.eval_every > 0 and (epoch + 1) % config.eval_every == 0)):
            which = range(min(config.eval_frames,
                              len(eval_data.sequence.frames)))
            r = evaluate(model, eval_data, frames=which)
            rows.append(MetricsRow(epoch=epoch, split="eval",
                                   r5=float(r[0]), r10=float(r[1]),
                                   r20=float(r[2])))
    return model, rows