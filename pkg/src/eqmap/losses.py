"""Loss terms over predictions, as graph nodes.

Builders take a Prediction (whose graph already contains the parameter
leaves) plus plain-array targets and return scalar nodes. Train loops
combine the nodes they need and differentiate once; tests differentiate
single terms via with_grads. Every stage is supervised with the same
targets (deep supervision), so each builder sums over stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .fields import _support_valid, downscale_field, downscale_mask
from .model import LevelSelector, Model, Prediction

__all__ = [
    "LossWeights",
    "supervised_terms",
    "loss_supervised",
    "keypoint_terms",
    "loss_keypoints",
    "loss_equivariance",
    "with_grads",
]

UV_DELTA = 0.1      # Huber corner in chart-coordinate units


@dataclass
class LossWeights:
    chart: float = 1.0
    uv: float = 1.0
    keypoint: float = 1.0
    equivariance: float = 0.1
    propagated: float = 1.0     # multiplier on propagated-click terms


def _target_arrays(anns, batch, charts, height, width, propagated_weight):
    """Dense target/weight arrays from per-frame sparse annotations."""
    ce_t = np.zeros((batch, height, width), dtype=np.int64)
    ce_w = np.zeros((batch, height, width))
    uv_t = np.zeros((batch, 2 * charts, height, width))
    uv_w = np.zeros((batch, 2 * charts, height, width))
    for b, ann in enumerate(anns):
        if ann is None:
            continue
        if ann.part_mask is not None:
            ce_t[b] = ann.part_mask
            ce_w[b] = 1.0
        for c in ann.clicks:
            xi = min(max(int(round(c.x)), 0), width - 1)
            yi = min(max(int(round(c.y)), 0), height - 1)
            w = propagated_weight if c.provenance == "propagated" else 1.0
            if w <= 0:
                continue
            ce_t[b, yi, xi] = c.chart
            ce_w[b, yi, xi] += w
            if c.has_uv and c.chart >= 1:
                ch = 2 * (c.chart - 1)
                uv_t[b, ch, yi, xi] = c.u[0]
                uv_t[b, ch + 1, yi, xi] = c.u[1]
                uv_w[b, ch:ch + 2, yi, xi] = w
    return ce_t, ce_w, uv_t, uv_w


def supervised_terms(pred: Prediction, anns, propagated_weight: float = 1.0):
    """Unweighted (classification, regression) nodes, summed over stages.

    anns: one FrameAnnotation (or None) per batch item. The regression
    term touches only the true chart's coordinate channels. An entirely
    empty batch yields constant zeros.
    """
    shape = pred.scores[0].value.shape
    ce_t, ce_w, uv_t, uv_w = _target_arrays(
        anns, shape[0], pred.config.charts, shape[2], shape[3],
        propagated_weight)
    ce = nn.add_weighted([(nn.softmax_cross_entropy(pred.scores[s], ce_t, ce_w),
                           1.0) for s in range(pred.config.stages)])
    uv = nn.add_weighted([(nn.smooth_l1(pred.uv[s], uv_t, uv_w, UV_DELTA),
                           1.0) for s in range(pred.config.stages)])
    return ce, uv


def loss_supervised(pred: Prediction, anns, weights: LossWeights) -> nn.Node:
    """Weighted sum of the supervised classification and regression terms."""
    ce, uv = supervised_terms(pred, anns, weights.propagated)
    return nn.add_weighted([(ce, weights.chart), (uv, weights.uv)])


def keypoint_terms(pred: Prediction, keypoints, kp_chart, kp_u):
    """Unweighted (classification, regression) nodes at keypoint pixels.

    keypoints: per batch item an (J, 3) array of (x, y, visible) or
    None; kp_chart (J,) and kp_u (J, 2) give each joint's fixed surface
    target.
    """
    shape = pred.scores[0].value.shape
    batch, height, width = shape[0], shape[2], shape[3]
    charts = pred.config.charts
    ce_t = np.zeros((batch, height, width), dtype=np.int64)
    ce_w = np.zeros((batch, height, width))
    uv_t = np.zeros((batch, 2 * charts, height, width))
    uv_w = np.zeros((batch, 2 * charts, height, width))
    for b, kps in enumerate(keypoints):
        if kps is None:
            continue
        for j in range(kps.shape[0]):
            x, y, vis = kps[j]
            if vis <= 0:
                continue
            xi = min(max(int(round(x)), 0), width - 1)
            yi = min(max(int(round(y)), 0), height - 1)
            k = int(kp_chart[j])
            ce_t[b, yi, xi] = k
            ce_w[b, yi, xi] = 1.0
            if k >= 1:
                ch = 2 * (k - 1)
                uv_t[b, ch, yi, xi] = kp_u[j, 0]
                uv_t[b, ch + 1, yi, xi] = kp_u[j, 1]
                uv_w[b, ch:ch + 2, yi, xi] = 1.0
    ce = nn.add_weighted([(nn.softmax_cross_entropy(pred.scores[s], ce_t, ce_w),
                           1.0) for s in range(pred.config.stages)])
    uv = nn.add_weighted([(nn.smooth_l1(pred.uv[s], uv_t, uv_w, UV_DELTA),
                           1.0) for s in range(pred.config.stages)])
    return ce, uv


def loss_keypoints(pred: Prediction, keypoints, kp_chart, kp_u,
                   weights: LossWeights) -> nn.Node:
    """Weighted keypoint loss: loss_supervised's form at keypoint pixels."""
    ce, uv = keypoint_terms(pred, keypoints, kp_chart, kp_u)
    return nn.add_weighted([(ce, weights.chart), (uv, weights.uv)])


def loss_equivariance(pred_a: Prediction, pred_b: Prediction, fields, masks,
                      selector: LevelSelector) -> nn.Node:
    """Feature-consistency loss between two views of the same content.

    fields: one CorrespondenceField per batch item whose domain is view
    A and whose values point into view B; masks: matching per-item
    ConsistencyMask (or None for all-pass). For each stage the selected
    tensor of B is pulled onto A's canvas through the field and compared
    pixelwise by cosine similarity, restricted to mask, field validity,
    and in-bounds sampling support. Gradients reach both predictions.
    """
    if selector.level is None:
        return nn.Node(0.0)
    batch = pred_a.batch
    if len(fields) != batch or len(masks) != batch:
        raise ValueError("one field and mask per batch item required")
    factor = selector.scale_factor
    maps = []
    include = []
    for f, m in zip(fields, masks):
        passed = np.ones((f.height, f.width), dtype=bool) if m is None else m.passed
        if factor > 1:
            f = downscale_field(f, factor)
            passed = downscale_mask(passed, factor)
        xs, ys = f.map[..., 0], f.map[..., 1]
        ok = passed & f.valid & _support_valid(
            np.ones((f.height, f.width), dtype=bool), xs, ys)
        maps.append(f.map)
        include.append(ok)
    maps = np.stack(maps)
    include = np.stack(include)
    terms = []
    for s in range(pred_a.config.stages):
        ta = selector.pick(pred_a, s)
        tb = selector.pick(pred_b, s)
        warped = nn.warp_bilinear(tb, maps)
        terms.append((nn.cosine_loss(ta, warped, include), 1.0))
    return nn.add_weighted(terms)


def with_grads(node: nn.Node, pred: Prediction, model: Model):
    """Evaluate one loss node and its flat parameter gradient."""
    grads = nn.backward(node)
    return float(node.value), model.collect_grads(pred.leaves, grads)