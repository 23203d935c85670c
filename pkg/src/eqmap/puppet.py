"""Articulated 2D puppet: part geometry, skeleton, kinematics, textures.

The body is a tree of capped tubes. Each part k owns chart k of the
surface atlas with coordinates u = (u1, u2): u1 is the angle around the
tube (front half is u1 in [0.25, 0.75], seam at the back), u2 the
position along the axis as a fraction of the tube length L.

A part's tube is longer than its joint-to-joint span: joints sit
``joint_pad`` units inside each end, and only the ring band between the
first and last mesh ring is rendered (caps project edge-on), so
adjacent parts overlap around joints and keypoints land on body pixels.

Rendering is orthographic along z. A surface point at angle a and axial
t projects to local coordinates (d, t) with d = r sin(2 pi (a - 0.5)),
so per-pixel chart/uv/flow ground truth is analytic and exact.
All lengths are in body units (the default figure is ~170 units tall);
rasterization scales by px_per_unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PartSpec",
    "PuppetConfig",
    "PuppetPose",
    "Placement",
    "build_parts",
    "canonical_pose",
    "sample_trajectory",
    "place_parts",
    "keypoint_positions",
    "keypoint_targets",
    "value_noise",
    "JOINT_NAMES",
    "KEYPOINT_NAMES",
    "FIGURE_UNITS",
]

FIGURE_UNITS = 170.0  # nominal canonical figure height used for px scaling

# articulated joints, in pose-vector order
JOINT_NAMES = (
    "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_hip", "r_hip", "l_knee", "r_knee",
)

# named keypoints, in keypoint-array order (J = 14)
KEYPOINT_NAMES = (
    "head_top", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee",
    "l_ankle", "r_ankle",
)


@dataclass
class PartSpec:
    """Static geometry of one tube part (all lengths in body units)."""

    name: str
    chart: int                      # 1-based chart id
    parent: str | None              # parent part name, None for the root
    anchor: tuple | None            # (t, d) of the joint in parent local coords
    joint: str | None               # pose joint driving this part (None: root)
    rel_angle: float                # canonical angle relative to parent axis
    length_between_joints: float
    radius: float
    joint_pad: float
    rings: int
    segments: int
    depth: int                      # paint order position (low = painted first)

    @property
    def length(self) -> float:
        return self.length_between_joints + 2.0 * self.joint_pad

    @property
    def band(self) -> tuple:
        """Axial extent [t_lo, t_hi] of the rendered ring band."""
        step = self.length / (self.rings + 1)
        return step, self.length - step


@dataclass
class PuppetConfig:
    num_parts: int = 10
    detail: float = 1.0       # scales ring/segment counts (coarse test meshes)
    scale: float = 1.0        # extra px_per_unit multiplier at render time


# (name, parent, anchor(t, d) in parent units or None, joint, rel_angle,
#  span, radius, pad, rings, segs, depth); order defines chart ids 1..10
# and guarantees every prefix is a connected body
_PART_ROWS = (
    ("torso",       None,        None,          None,         0.0,       55.0, 16.0, 12.0, 8, 16, 4),
    ("head",        "torso",     ("end", 0.0),  "neck",       0.0,       24.0, 11.0,  8.0, 5, 12, 7),
    ("l_arm_upper", "torso",     ("end-4", -14.0), "l_shoulder", np.pi + 0.30, 30.0,  6.0,  4.0, 9,  8, 8),
    ("l_arm_lower", "l_arm_upper", ("end", 0.0), "l_elbow",   -0.35,     28.0,  5.0,  4.0, 9,  8, 9),
    ("r_arm_upper", "torso",     ("end-4", 14.0), "r_shoulder", np.pi - 0.30, 30.0,  6.0,  4.0, 9,  8, 0),
    ("r_arm_lower", "r_arm_upper", ("end", 0.0), "r_elbow",    0.35,     28.0,  5.0,  4.0, 9,  8, 1),
    ("l_leg_upper", "torso",     ("base+2", -7.0), "l_hip",   np.pi - 0.06, 42.0,  9.0,  6.0, 9,  8, 5),
    ("l_leg_lower", "l_leg_upper", ("end", 0.0), "l_knee",     0.10,     40.0,  7.5,  5.0, 10, 8, 6),
    ("r_leg_upper", "torso",     ("base+2", 7.0), "r_hip",    np.pi + 0.06, 42.0,  9.0,  6.0, 9,  8, 2),
    ("r_leg_lower", "r_leg_upper", ("end", 0.0), "r_knee",    -0.10,     40.0,  7.5,  5.0, 10, 8, 3),
)

# joint angle walk limits around the canonical pose, radians
JOINT_LIMITS = {
    "neck": 0.25,
    "l_shoulder": 0.7, "r_shoulder": 0.7,
    "l_elbow": 0.7, "r_elbow": 0.7,
    "l_hip": 0.35, "r_hip": 0.35,
    "l_knee": 0.5, "r_knee": 0.5,
}


def build_parts(config: PuppetConfig) -> list:
    """Instantiate the first ``num_parts`` parts at the configured detail."""
    if config.num_parts < 2:
        raise ValueError("puppet needs at least 2 parts")
    if config.num_parts > len(_PART_ROWS):
        raise ValueError(f"at most {len(_PART_ROWS)} parts available")
    parts = []
    for idx, row in enumerate(_PART_ROWS[: config.num_parts]):
        name, parent, anchor, joint, rel, span, radius, pad, rings, segs, depth = row
        rings = max(3, int(round(rings * config.detail)))
        segs = max(6, int(round(segs * config.detail)))
        # joints must sit strictly inside the rendered band
        while span + 2 * pad > pad * (rings + 1):
            rings += 1
        parts.append(PartSpec(name, idx + 1, parent, anchor, joint, rel,
                              span, radius, pad, rings, segs, depth))
    return parts


def _resolve_anchor(spec_anchor, parent: PartSpec):
    tag, d = spec_anchor
    if tag == "end":
        t = parent.length - parent.joint_pad
    elif tag == "end-4":
        t = parent.length - parent.joint_pad - 4.0
    elif tag == "base+2":
        t = parent.joint_pad + 2.0
    else:  # pragma: no cover - table is static
        raise ValueError(f"unknown anchor tag {tag!r}")
    return t, d


@dataclass
class PuppetPose:
    """Root placement plus per-joint angle offsets from the canonical pose.

    root_xy is in pixels on the render canvas; joint angle offsets are
    radians, ordered as JOINT_NAMES.
    """

    root_xy: np.ndarray
    root_angle: float
    joint_angles: np.ndarray = field(default_factory=lambda: np.zeros(len(JOINT_NAMES)))

    def copy(self) -> "PuppetPose":
        return PuppetPose(self.root_xy.copy(), self.root_angle, self.joint_angles.copy())


def canonical_pose(resolution: int) -> PuppetPose:
    """Upright figure, pelvis slightly below canvas center."""
    return PuppetPose(np.array([0.5 * resolution, 0.48 * resolution]),
                      -np.pi / 2.0, np.zeros(len(JOINT_NAMES)))


def sample_trajectory(resolution: int, length: int, rng: np.random.Generator,
                      motion: float = 0.08) -> list:
    """Bounded random walk over poses; deterministic given the generator.

    motion is the per-frame joint angle std in radians; root translation
    and rotation walk proportionally.
    """
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    base = canonical_pose(resolution)
    limits = np.array([JOINT_LIMITS[name] for name in JOINT_NAMES])
    pose = base.copy()
    pose.joint_angles = rng.uniform(-0.5, 0.5, len(JOINT_NAMES)) * limits
    pose.root_xy = base.root_xy + rng.uniform(-1.0, 1.0, 2) * 0.02 * resolution
    pose.root_angle = base.root_angle + rng.uniform(-0.06, 0.06)
    out = [pose.copy()]
    for _ in range(length - 1):
        pose.joint_angles = np.clip(
            pose.joint_angles + rng.normal(0.0, motion, len(JOINT_NAMES)),
            -limits, limits)
        pose.root_xy = np.clip(
            pose.root_xy + rng.normal(0.0, 0.01 * resolution, 2),
            base.root_xy - 0.04 * resolution, base.root_xy + 0.04 * resolution)
        pose.root_angle = float(np.clip(
            pose.root_angle + rng.normal(0.0, 0.02),
            base.root_angle - 0.15, base.root_angle + 0.15))
        out.append(pose.copy())
    return out


@dataclass
class Placement:
    """World-frame placement of one part: base point of the tube axis
    (t = 0) and the axis direction angle. Units follow the caller
    (canonical placement uses body units, rendering uses body units with
    a separate px_per_unit scale applied by the rasterizer)."""

    base: np.ndarray
    angle: float

    @property
    def axis(self) -> np.ndarray:
        return np.array([np.cos(self.angle), np.sin(self.angle)])

    @property
    def normal(self) -> np.ndarray:
        a = self.angle
        return np.array([-np.sin(a), np.cos(a)])

    def to_world(self, t, d):
        """Local (axial, transverse) -> world, broadcasting over arrays."""
        t = np.asarray(t, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        return (self.base
                + t[..., None] * self.axis
                + d[..., None] * self.normal)

    def to_local(self, points):
        pts = np.asarray(points, dtype=np.float64) - self.base
        return pts @ self.axis, pts @ self.normal


def place_parts(parts: list, pose: PuppetPose) -> dict:
    """Forward kinematics: part name -> Placement, in body units.

    The root part's joint A (the pelvis) sits at the origin; the
    rasterizer maps unit world to pixels as
    ``px = pose.root_xy + px_per_unit * world``.
    """
    by_name = {p.name: p for p in parts}
    angles = dict(zip(JOINT_NAMES, pose.joint_angles))
    placements: dict = {}
    for part in parts:
        if part.parent is None:
            angle = pose.root_angle
            base = -part.joint_pad * np.array([np.cos(angle), np.sin(angle)])
            placements[part.name] = Placement(base, angle)
            continue
        parent = by_name[part.parent]
        t_a, d_a = _resolve_anchor(part.anchor, parent)
        anchor_world = placements[parent.name].to_world(t_a, d_a)
        angle = placements[parent.name].angle + part.rel_angle + angles.get(part.joint, 0.0)
        base = anchor_world - part.joint_pad * np.array([np.cos(angle), np.sin(angle)])
        placements[part.name] = Placement(base, angle)
    return placements


# ---------------------------------------------------------------------------
# keypoints


def _keypoint_sites(parts: list) -> list:
    """(keypoint name, part name, axial t) for every keypoint whose part
    exists; joint keypoints belong to the distal part at its base."""
    have = {p.name for p in parts}
    by_name = {p.name: p for p in parts}
    sites = []
    for kp in KEYPOINT_NAMES:
        if kp == "head_top" and "head" in have:
            p = by_name["head"]
            sites.append((kp, "head", p.length - p.joint_pad))
        elif kp == "neck" and "head" in have:
            sites.append((kp, "head", by_name["head"].joint_pad))
        elif kp.endswith("shoulder"):
            name = kp[0] + "_arm_upper"
            if name in have:
                sites.append((kp, name, by_name[name].joint_pad))
        elif kp.endswith("elbow"):
            name = kp[0] + "_arm_lower"
            if name in have:
                sites.append((kp, name, by_name[name].joint_pad))
        elif kp.endswith("wrist"):
            name = kp[0] + "_arm_lower"
            if name in have:
                p = by_name[name]
                sites.append((kp, name, p.length - p.joint_pad))
        elif kp.endswith("hip"):
            name = kp[0] + "_leg_upper"
            if name in have:
                sites.append((kp, name, by_name[name].joint_pad))
        elif kp.endswith("knee"):
            name = kp[0] + "_leg_lower"
            if name in have:
                sites.append((kp, name, by_name[name].joint_pad))
        elif kp.endswith("ankle"):
            name = kp[0] + "_leg_lower"
            if name in have:
                p = by_name[name]
                sites.append((kp, name, p.length - p.joint_pad))
    return sites


def keypoint_targets(parts: list) -> dict:
    """Fixed surface labels per keypoint: names, chart ids, u coords.

    Joint points sit on the tube axis, so u1 = 0.5 (front center)."""
    sites = _keypoint_sites(parts)
    by_name = {p.name: p for p in parts}
    names = [s[0] for s in sites]
    charts = np.array([by_name[s[1]].chart for s in sites], dtype=np.int32)
    u = np.array([[0.5, s[2] / by_name[s[1]].length] for s in sites])
    return {"names": names, "chart": charts, "u": u}


def keypoint_positions(parts: list, placements: dict, px_per_unit: float,
                       root_xy: np.ndarray) -> np.ndarray:
    """Pixel positions (J, 2) of the keypoints under given placements."""
    sites = _keypoint_sites(parts)
    out = np.zeros((len(sites), 2))
    for i, (_, part_name, t) in enumerate(sites):
        out[i] = np.asarray(root_xy) + placements[part_name].to_world(t, 0.0) * px_per_unit
    return out


# ---------------------------------------------------------------------------
# procedural texture


def _lattice(ix: np.ndarray, iy: np.ndarray, table: np.ndarray) -> np.ndarray:
    idx = ((ix * 73856093) ^ (iy * 19349663)) & (table.size - 1)
    return table[idx]


def value_noise(xs: np.ndarray, ys: np.ndarray, seed: int,
                base_freq: float = 0.15, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1], deterministic in (seed, coords)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    total = np.zeros(np.broadcast(xs, ys).shape)
    norm = 0.0
    amp = 1.0
    freq = base_freq
    for _ in range(octaves):
        table = rng.random(4096)
        fx = np.asarray(xs) * freq
        fy = np.asarray(ys) * freq
        ix = np.floor(fx).astype(np.int64)
        iy = np.floor(fy).astype(np.int64)
        tx = fx - ix
        ty = fy - iy
        # smoothstep keeps lattice artifacts below the texture contrast
        sx = tx * tx * (3.0 - 2.0 * tx)
        sy = ty * ty * (3.0 - 2.0 * ty)
        v00 = _lattice(ix, iy, table)
        v01 = _lattice(ix + 1, iy, table)
        v10 = _lattice(ix, iy + 1, table)
        v11 = _lattice(ix + 1, iy + 1, table)
        val = (v00 * (1 - sx) + v01 * sx) * (1 - sy) + (v10 * (1 - sx) + v11 * sx) * sy
        total += amp * val
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm