"""Sparse click annotations, reduction schemes, and training pairs.

An annotated frame carries up to three kinds of labels: clicks (pixel
plus chart index, usually with a chart coordinate), a dense part mask,
and named keypoint pixels. Reduction schemes thin these the way the
corresponding supervision budgets would: dropping whole frames,
dropping individual clicks, or keeping only masks or keypoints.

Training pairs couple a base frame A with a second view B (a warped
copy of A, or a nearby frame of the same sequence) through a
correspondence field whose domain is A. That one field serves both
consumers: transporting A's labels onto B, and pulling B's predictions
back onto A's canvas for the consistency loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .fields import (ConsistencyMask, CorrespondenceField, WarpPolicy,
                     forward_backward_mask, integrate_flow, invert_field,
                     realize_warp, sample_warp, warp_image, warp_points)
from .sequences import Sequence, corrupt_flow, field_between

__all__ = [
    "Click",
    "FrameAnnotation",
    "AnnotationSet",
    "SCHEMES",
    "annotate_sequence",
    "subsample_annotations",
    "propagate_clicks",
    "propagate_gt",
    "propagate_dataset",
    "TrainingTriplet",
    "build_triplets",
]

DEFAULT_CLICKS_PER_FRAME = 100


@dataclass
class Click:
    x: float
    y: float
    chart: int
    u: np.ndarray | None            # (2,) in [0,1]^2, or None for chart-only
    provenance: str = "manual"      # "manual" | "propagated"

    @property
    def has_uv(self) -> bool:
        return self.u is not None

    def copy(self) -> "Click":
        return Click(self.x, self.y, int(self.chart),
                     None if self.u is None else self.u.copy(), self.provenance)


@dataclass
class FrameAnnotation:
    clicks: list = field(default_factory=list)
    part_mask: np.ndarray | None = None     # (H, W) int, 0 = background
    keypoints: np.ndarray | None = None     # (J, 3): x, y, visible

    def copy(self) -> "FrameAnnotation":
        return FrameAnnotation(
            clicks=[c.copy() for c in self.clicks],
            part_mask=None if self.part_mask is None else self.part_mask.copy(),
            keypoints=None if self.keypoints is None else self.keypoints.copy(),
        )

    @property
    def empty(self) -> bool:
        return (not self.clicks and self.part_mask is None
                and self.keypoints is None)


@dataclass
class AnnotationSet:
    resolution: int
    frames: dict = field(default_factory=dict)  # frame index -> FrameAnnotation

    def check(self) -> "AnnotationSet":
        r = self.resolution
        for idx, ann in self.frames.items():
            for c in ann.clicks:
                if not (0 <= c.x <= r - 1 and 0 <= c.y <= r - 1):
                    raise ValueError(f"click outside image on frame {idx}")
                if c.u is not None:
                    u = np.asarray(c.u)
                    if u.shape != (2,) or np.any(u < 0) or np.any(u > 1):
                        raise ValueError(f"click u out of range on frame {idx}")
        return self

    def copy(self) -> "AnnotationSet":
        return AnnotationSet(self.resolution,
                             {i: a.copy() for i, a in self.frames.items()})

    def num_clicks(self, with_uv: bool | None = None) -> int:
        total = 0
        for ann in self.frames.values():
            for c in ann.clicks:
                if with_uv is None or c.has_uv == with_uv:
                    total += 1
        return total


def annotate_sequence(seq: Sequence, rng: np.random.Generator,
                      clicks_per_frame: int = DEFAULT_CLICKS_PER_FRAME,
                      frame_indices=None) -> AnnotationSet:
    """Full annotation: clicks uniform over the figure, masks, keypoints.

    Clicks sit at pixel centers and copy the exact rendered labels, so
    they are internally consistent with the dense ground truth.
    """
    if clicks_per_frame < 0:
        raise ValueError("clicks_per_frame must be >= 0")
    if frame_indices is None:
        frame_indices = range(len(seq.frames))
    out = AnnotationSet(seq.config.resolution)
    for idx in frame_indices:
        frame = seq.frames[idx]
        ys, xs = np.nonzero(frame.part_mask)
        n = min(clicks_per_frame, xs.size)
        pick = rng.choice(xs.size, size=n, replace=False) if xs.size else []
        clicks = []
        for j in pick:
            x, y = int(xs[j]), int(ys[j])
            clicks.append(Click(float(x), float(y),
                                int(frame.part_mask[y, x]),
                                frame.gt_uv.u[y, x].copy()))
        out.frames[idx] = FrameAnnotation(
            clicks=clicks,
            part_mask=frame.part_mask.copy(),
            keypoints=frame.keypoints.copy(),
        )
    return out


SCHEMES = ("full", "image_frac", "image_frac_k_only", "point_frac",
           "seg_only", "keypoints_only", "point_frac_plus_keypoints")

# whether each scheme retains keypoint pixels unless the caller overrides
_SCHEME_KEYPOINTS = {
    "full": True,
    "image_frac": False,
    "image_frac_k_only": False,
    "point_frac": False,
    "seg_only": False,
    "keypoints_only": True,
    "point_frac_plus_keypoints": True,
}


def subsample_annotations(full: AnnotationSet, scheme: str,
                          fraction: float = 1.0,
                          rng: np.random.Generator | None = None,
                          keep_keypoints: bool | None = None) -> AnnotationSet:
    """Thin an annotation set according to a named reduction scheme.

    image_frac keeps whole frames (clicks and mask) on a fraction of the
    frames and nothing elsewhere. image_frac_k_only keeps part masks on
    every frame but clicks only on the fraction. point_frac drops each
    click independently and keeps no dense masks. seg_only keeps only
    masks; keypoints_only keeps only keypoints. The keypoint channel can
    be forced on or off for any scheme via keep_keypoints.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; valid: {', '.join(SCHEMES)}")
    needs_fraction = scheme in ("image_frac", "image_frac_k_only",
                                "point_frac", "point_frac_plus_keypoints")
    if needs_fraction and not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    kp = _SCHEME_KEYPOINTS[scheme] if keep_keypoints is None else keep_keypoints

    out = AnnotationSet(full.resolution)
    indices = sorted(full.frames)
    if scheme in ("image_frac", "image_frac_k_only"):
        n_keep = max(1, int(round(fraction * len(indices))))
        kept = set(np.asarray(indices)[rng.permutation(len(indices))[:n_keep]])
    else:
        kept = set(indices)

    for idx in indices:
        src = full.frames[idx]
        ann = FrameAnnotation()
        if scheme == "full":
            ann = src.copy()
        elif scheme == "image_frac":
            if idx in kept:
                ann.clicks = [c.copy() for c in src.clicks]
                if src.part_mask is not None:
                    ann.part_mask = src.part_mask.copy()
        elif scheme == "image_frac_k_only":
            if src.part_mask is not None:
                ann.part_mask = src.part_mask.copy()
            if idx in kept:
                ann.clicks = [c.copy() for c in src.clicks]
        elif scheme in ("point_frac", "point_frac_plus_keypoints"):
            survives = rng.random(len(src.clicks)) < fraction
            ann.clicks = [c.copy() for c, s in zip(src.clicks, survives) if s]
        elif scheme == "seg_only":
            if src.part_mask is not None:
                ann.part_mask = src.part_mask.copy()
        elif scheme == "keypoints_only":
            pass
        if kp and src.keypoints is not None and (scheme != "image_frac" or idx in kept):
            ann.keypoints = src.keypoints.copy()
        if scheme == "full" and not kp:
            ann.keypoints = None
        out.frames[idx] = ann
    return out


def propagate_clicks(clicks: list, field_from_source: CorrespondenceField,
                     mask: ConsistencyMask | None) -> list:
    """Transport clicks through a field whose domain is their own frame.

    Each click's pixel moves to the stored corresponding position;
    labels ride along unchanged. Clicks landing outside the target
    image, on invalid field pixels, or on mask-rejected source pixels
    are dropped. Survivors are tagged as propagated.
    """
    if not clicks:
        return []
    pts = np.array([[c.x, c.y] for c in clicks])
    moved, ok = warp_points(pts, field_from_source)
    h, w = field_from_source.height, field_from_source.width
    out = []
    for c, (x, y), good in zip(clicks, moved, ok):
        if not good:
            continue
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            continue
        if mask is not None:
            yi = int(round(c.y))
            xi = int(round(c.x))
            if not mask.passed[yi, xi]:
                continue
        moved_click = replace(c.copy(), x=float(x), y=float(y),
                              provenance="propagated")
        out.append(moved_click)
    return out


def propagate_gt(ann: FrameAnnotation, field_from_source: CorrespondenceField,
                 mask: ConsistencyMask | None = None) -> FrameAnnotation:
    """Carry a frame's clicks over to another frame through a field.

    The field's domain must be the frame `ann` belongs to. Only clicks
    travel; dense masks and keypoint pixels stay with their own frame.
    """
    return FrameAnnotation(clicks=propagate_clicks(ann.clicks,
                                                   field_from_source, mask))


def propagate_dataset(seq: Sequence, ann: AnnotationSet, window: int = 3,
                      threshold: float = 5.0,
                      rng: np.random.Generator | None = None,
                      noise: dict | None = None):
    """Spread every frame's clicks to its neighbors within `window`.

    Each annotated frame sends its clicks up to `window` frames in both
    directions, so a frame can gain as many as 2*window propagated
    neighbors' worth of labels. With `noise` set the per-step flows are
    corrupted before integration (independently per direction) and the
    round-trip check runs on the corrupted pair; otherwise the exact
    renderer fields are used. Returns (augmented copy, stats dict with
    attempted / kept / survival).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if noise is not None and rng is None:
        raise ValueError("corrupted propagation needs an rng")
    out = ann.copy()
    n = len(seq.frames)
    attempted = 0
    kept = 0
    for s, fr in sorted(ann.frames.items()):
        if not fr.clicks:
            continue
        for gap in range(1, window + 1):
            for t in (s - gap, s + gap):
                if not 0 <= t < n:
                    continue
                if noise is None:
                    fwd = field_between(seq, s, t)
                    bwd = field_between(seq, t, s)
                else:
                    fwd = _integrated(seq.frames, s, t, rng, noise)
                    bwd = _integrated(seq.frames, t, s, rng, noise)
                mask = forward_backward_mask(fwd, bwd, threshold)
                moved = propagate_clicks(fr.clicks, fwd, mask)
                attempted += len(fr.clicks)
                kept += len(moved)
                if moved:
                    target = out.frames.setdefault(t, FrameAnnotation())
                    target.clicks.extend(moved)
    stats = {"attempted": attempted, "kept": kept,
             "survival": kept / attempted if attempted else 0.0}
    return out, stats


@dataclass
class TrainingTriplet:
    frame_index: int                # base frame A within its dataset
    other_index: int | None         # B's frame index; None for a warped copy
    image_b: np.ndarray             # B's image
    g: CorrespondenceField          # domain A, values in B
    mask: ConsistencyMask           # domain A
    source: str                     # "synthetic_warp" | "real_flow"

    def check(self, image_a: np.ndarray) -> "TrainingTriplet":
        if self.g.map.shape[:2] != image_a.shape[:2]:
            raise ValueError("field does not match frame A")
        if self.g.map.shape[:2] != self.image_b.shape[:2]:
            raise ValueError("field does not match frame B")
        return self


def _synthetic_triplet(frame, idx, policy: WarpPolicy,
                       rng: np.random.Generator) -> TrainingTriplet:
    h, w = frame.image.shape[:2]
    spec = sample_warp(rng, policy)
    realized = realize_warp(spec, w, h)      # domain: warped copy, values: A
    image_b = warp_image(frame.image, realized, boundary="clamp")
    g = invert_field(realized)               # domain: A, values: warped copy
    mask = ConsistencyMask(np.ones(g.map.shape[:2], dtype=bool), threshold=np.inf)
    return TrainingTriplet(idx, None, image_b, g, mask, "synthetic_warp")


def _integrated(seq_frames, start: int, stop: int,
                rng: np.random.Generator, noise: dict | None):
    """Chain per-step flows from `start` toward `stop`, newest first."""
    step = 1 if stop > start else -1
    chain = []
    for t in range(start, stop, step):
        flow = getattr(seq_frames[t], "flow_next" if step == 1 else "flow_prev")
        if noise is not None:
            flow = corrupt_flow(flow, rng, **noise)
        chain.append(flow)
    chain.reverse()
    return integrate_flow(chain)


def build_triplets(seq: Sequence, mode: str, rng: np.random.Generator,
                   policy: WarpPolicy | None = None, window: int = 1,
                   threshold: float = 5.0,
                   noise: dict | None = None) -> list:
    """Construct training pairs from a sequence.

    synthetic: one warped copy per frame, sampled from `policy`.
    real: pairs (T, T+w) for w = 1..window with flows integrated from
    per-step fields (independently corrupted per direction when `noise`
    is given) and a round-trip consistency mask at `threshold` px.
    """
    if mode == "synthetic":
        if policy is None:
            raise ValueError("synthetic mode needs a warp policy")
        return [_synthetic_triplet(f, i, policy, rng)
                for i, f in enumerate(seq.frames)]
    if mode != "real":
        raise ValueError(f"unknown triplet mode {mode!r}")
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > 3:
        raise ValueError("window is capped at 3 frames")
    out = []
    n = len(seq.frames)
    for w in range(1, window + 1):
        for t in range(0, n - w):
            fwd = _integrated(seq.frames, t, t + w, rng, noise)
            bwd = _integrated(seq.frames, t + w, t, rng, noise)
            mask = forward_backward_mask(fwd, bwd, threshold)
            out.append(TrainingTriplet(t, t + w, seq.frames[t + w].image,
                                       fwd, mask, "real_flow"))
    return out