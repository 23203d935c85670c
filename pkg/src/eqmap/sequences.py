"""Rendered puppet sequences with exact per-pixel ground truth.

Every frame knows, analytically: which part owns each pixel (painted in
a fixed depth order), the surface coordinates (k, u) there, dense flow
to the neighbouring frames (rigid per part, identity on background),
co-visibility flags, and keypoint pixels. Flow fields follow the
backward-map convention of eqmap.fields: frame t's ``flow_next`` has
domain t and stores positions in frame t+1, so it simultaneously warps
frame t+1's image into frame t and transports frame-t annotations
forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fields import CorrespondenceField, _pixel_grid
from .puppet import (FIGURE_UNITS, PuppetConfig, build_parts, keypoint_positions,
                     keypoint_targets, place_parts, sample_trajectory, value_noise)
from .surface import UVMap

__all__ = [
    "RenderConfig",
    "Frame",
    "Sequence",
    "render_sequence",
    "field_between",
    "corrupt_flow",
    "locate_points",
]


@dataclass
class RenderConfig:
    resolution: int = 64
    length: int = 80
    seed: int = 0
    texture_seed: int = 7
    motion: float = 0.08            # joint-angle walk std per frame, radians
    puppet: PuppetConfig = field(default_factory=PuppetConfig)

    @property
    def px_per_unit(self) -> float:
        return self.resolution * self.puppet.scale / FIGURE_UNITS


@dataclass
class Frame:
    image: np.ndarray               # (H, W) float64 in [0, 1]
    gt_uv: UVMap
    flow_next: CorrespondenceField | None
    flow_prev: CorrespondenceField | None
    covisible_next: np.ndarray | None  # (H, W) bool, visible here AND in t+1
    keypoints: np.ndarray           # (J, 3): x, y, visible
    pose: object
    local_t: np.ndarray             # (H, W) axial unit coord of the owner part
    local_d: np.ndarray             # (H, W) transverse unit coord

    @property
    def part_mask(self) -> np.ndarray:
        return self.gt_uv.chart


@dataclass
class Sequence:
    config: RenderConfig
    parts: list
    frames: list
    keypoints: dict                 # fixed (chart, u) targets per joint

    def __len__(self) -> int:
        return len(self.frames)


def _paint(parts, placements, root_xy, ppu, resolution):
    """Rasterize one pose: per-pixel owner chart and local coordinates."""
    grid = _pixel_grid(resolution, resolution)
    owner = np.zeros((resolution, resolution), dtype=np.int32)
    tloc = np.zeros((resolution, resolution))
    dloc = np.zeros((resolution, resolution))
    pts_units = (grid - np.asarray(root_xy)) / ppu
    for part in sorted(parts, key=lambda p: p.depth):
        pl = placements[part.name]
        rel = pts_units - pl.base
        t = rel @ pl.axis
        d = rel @ pl.normal
        lo, hi = part.band
        inside = (t >= lo) & (t <= hi) & (np.abs(d) <= part.radius)
        owner[inside] = part.chart
        tloc[inside] = t[inside]
        dloc[inside] = d[inside]
    return owner, tloc, dloc


def _surface_uv(parts, owner, tloc, dloc):
    h, w = owner.shape
    u = np.zeros((h, w, 2))
    for part in parts:
        sel = owner == part.chart
        if not np.any(sel):
            continue
        ratio = np.clip(dloc[sel] / part.radius, -1.0, 1.0)
        u[sel, 0] = 0.5 + np.arcsin(ratio) / (2.0 * np.pi)
        u[sel, 1] = tloc[sel] / part.length
    return u


def _shade(parts, owner, tloc, dloc, resolution, texture_seed, num_charts):
    rng = np.random.Generator(np.random.PCG64(texture_seed))
    bases = rng.permutation(np.linspace(0.42, 0.93, num_charts))
    grid = _pixel_grid(resolution, resolution)
    img = 0.04 + 0.36 * value_noise(grid[..., 0], grid[..., 1],
                                    texture_seed * 1000 + 17,
                                    base_freq=0.09, octaves=2)
    for part in parts:
        sel = owner == part.chart
        if not np.any(sel):
            continue
        tex = value_noise(tloc[sel], dloc[sel], texture_seed * 1000 + part.chart,
                          base_freq=0.15, octaves=3)
        u2 = tloc[sel] / part.length
        # the axial gradient gives position-along-limb a photometric cue
        img[sel] = bases[part.chart - 1] + 0.30 * (tex - 0.5) + 0.16 * (u2 - 0.5)
    return np.clip(img, 0.02, 0.99)


def field_between(seq: Sequence, frame_a: int, frame_b: int) -> CorrespondenceField:
    """Exact field with domain frame_a whose values are frame_b positions.

    Foreground pixels move rigidly with their owner part; background is
    static (identity). Valid everywhere; bounds are checked by samplers.
    """
    cfg = seq.config
    fa = seq.frames[frame_a]
    ppu = cfg.px_per_unit
    placements_b = place_parts(seq.parts, seq.frames[frame_b].pose)
    root_b = np.asarray(seq.frames[frame_b].pose.root_xy)
    mapped = _pixel_grid(cfg.resolution, cfg.resolution).copy()
    owner = fa.part_mask
    for part in seq.parts:
        sel = owner == part.chart
        if not np.any(sel):
            continue
        pl = placements_b[part.name]
        world = pl.base + fa.local_t[sel, None] * pl.axis + fa.local_d[sel, None] * pl.normal
        mapped[sel] = root_b + world * ppu
    return CorrespondenceField(mapped, np.ones(owner.shape, dtype=bool))


def _covisible(seq: Sequence, frame_a: int, frame_b: int,
               flow: CorrespondenceField) -> np.ndarray:
    """Conservative 'same surface point visible in both frames' flag.

    Foreground pixels require all four support pixels of the landing
    point to be owned by the same part (this also makes the analytic
    round-trip exact there); background pixels require background at the
    same pixel in frame_b.
    """
    owner_a = seq.frames[frame_a].part_mask
    owner_b = seq.frames[frame_b].part_mask
    h, w = owner_a.shape
    xs = flow.map[..., 0]
    ys = flow.map[..., 1]
    inb = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
    same = np.ones((h, w), dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            same &= owner_b[y0 + dy, x0 + dx] == owner_a
    fg = owner_a > 0
    out = np.zeros((h, w), dtype=bool)
    out[fg] = (inb & same)[fg]
    bg = ~fg
    out[bg] = (owner_b == 0)[bg]
    return out


def render_sequence(config: RenderConfig, seed: int | None = None) -> Sequence:
    """Deterministic sequence render; `seed` overrides config.seed."""
    if config.resolution < 8:
        raise ValueError("resolution too small to draw the figure")
    if config.length < 1:
        raise ValueError("sequence length must be >= 1")
    use_seed = config.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(use_seed))
    parts = build_parts(config.puppet)
    poses = sample_trajectory(config.resolution, config.length, rng, config.motion)
    ppu = config.px_per_unit
    num_charts = max(p.chart for p in parts)

    seq = Sequence(config=config, parts=parts, frames=[],
                   keypoints=keypoint_targets(parts))
    for pose in poses:
        placements = place_parts(parts, pose)
        owner, tloc, dloc = _paint(parts, placements, pose.root_xy, ppu,
                                   config.resolution)
        u = _surface_uv(parts, owner, tloc, dloc)
        img = _shade(parts, owner, tloc, dloc, config.resolution,
                     config.texture_seed, num_charts)
        kp_xy = keypoint_positions(parts, placements, ppu, pose.root_xy)
        vis = np.zeros(kp_xy.shape[0])
        xi = np.round(kp_xy[:, 0]).astype(np.int64)
        yi = np.round(kp_xy[:, 1]).astype(np.int64)
        inb = ((xi >= 0) & (xi < config.resolution)
               & (yi >= 0) & (yi < config.resolution))
        vis[inb] = (owner[yi[inb], xi[inb]] > 0).astype(np.float64)
        seq.frames.append(Frame(
            image=img, gt_uv=UVMap(chart=owner, u=u),
            flow_next=None, flow_prev=None, covisible_next=None,
            keypoints=np.concatenate([kp_xy, vis[:, None]], axis=1),
            pose=pose, local_t=tloc, local_d=dloc,
        ))

    for t in range(len(seq.frames)):
        if t + 1 < len(seq.frames):
            seq.frames[t].flow_next = field_between(seq, t, t + 1)
            seq.frames[t].covisible_next = _covisible(seq, t, t + 1,
                                                      seq.frames[t].flow_next)
        if t > 0:
            seq.frames[t].flow_prev = field_between(seq, t, t - 1)
    return seq


def locate_points(seq: Sequence, frame_idx: int, points: np.ndarray):
    """Analytic (chart, u) at arbitrary float pixel positions of a frame.

    Follows the same paint order as the rasterizer; chart 0 means
    background. Used as an oracle for transported labels.
    """
    cfg = seq.config
    pose = seq.frames[frame_idx].pose
    placements = place_parts(seq.parts, pose)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pts_units = (pts - np.asarray(pose.root_xy)) / cfg.px_per_unit
    chart = np.zeros(pts.shape[0], dtype=np.int32)
    u = np.zeros((pts.shape[0], 2))
    for part in sorted(seq.parts, key=lambda p: p.depth):
        pl = placements[part.name]
        rel = pts_units - pl.base
        t = rel @ pl.axis
        d = rel @ pl.normal
        lo, hi = part.band
        inside = (t >= lo) & (t <= hi) & (np.abs(d) <= part.radius)
        if not np.any(inside):
            continue
        chart[inside] = part.chart
        ratio = np.clip(d[inside] / part.radius, -1.0, 1.0)
        u[inside, 0] = 0.5 + np.arcsin(ratio) / (2.0 * np.pi)
        u[inside, 1] = t[inside] / part.length
    return chart, u


def corrupt_flow(flow: CorrespondenceField, rng: np.random.Generator,
                 sigma: float = 0.5, outlier_frac: float = 0.02,
                 outlier_mag: float = 10.0, block: int = 4) -> CorrespondenceField:
    """Optical-flow corruption model: smooth noise plus outlier blocks.

    Adds Gaussian-filtered noise rescaled to per-component std ``sigma``
    and stamps ``outlier_frac`` of the pixels (in ``block`` x ``block``
    squares) with a coherent offset of magnitude ``outlier_mag``.
    Validity is preserved. Returns the corrupted pixel index set on the
    field as ``.outlier_mask`` for test bookkeeping.
    """
    if sigma < 0 or outlier_frac < 0:
        raise ValueError("corruption parameters must be non-negative")
    h, w = flow.height, flow.width
    mapped = flow.map.copy()
    if sigma > 0:
        noise = rng.normal(0.0, 1.0, (h, w, 2))
        smooth = np.stack([ndimage.gaussian_filter(noise[..., c], 2.0)
                           for c in range(2)], axis=-1)
        std = smooth.std()
        if std > 0:
            mapped += smooth * (sigma / std)
    outliers = np.zeros((h, w), dtype=bool)
    n_blocks = int(round(outlier_frac * h * w / (block * block)))
    for _ in range(n_blocks):
        y0 = int(rng.integers(0, max(h - block, 1)))
        x0 = int(rng.integers(0, max(w - block, 1)))
        ang = rng.uniform(0.0, 2.0 * np.pi)
        off = outlier_mag * np.array([np.cos(ang), np.sin(ang)])
        mapped[y0:y0 + block, x0:x0 + block] += off
        outliers[y0:y0 + block, x0:x0 + block] = True
    out = CorrespondenceField(mapped, flow.valid.copy())
    out.outlier_mask = outliers
    return out