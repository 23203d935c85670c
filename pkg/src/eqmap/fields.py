"""Dense correspondence fields and the algebra used to move images,
points, and labels between frames.

Conventions (load-bearing, everything downstream assumes them):

* A field stores a backward map: ``map[y, x] = (sx, sy)`` is the source
  location that target pixel ``(x, y)`` looks up. Warping is therefore a
  direct bilinear gather, never a scatter.
* Channel order in ``map`` is (x, y); pixel centers sit on integer
  coordinates; coordinate (0, 0) is the top-left pixel center and
  (W-1, H-1) the bottom-right.
* A translation *of content* by +d is the field ``map[p] = p - d``.
* ``compose(f, g).map[p] = f.map(g.map[p])``: g's lookup runs first, so
  the composite's domain is g's domain. ``integrate_flow([a, b, c])``
  left-folds compose, i.e. ``a.map ∘ b.map ∘ c.map``; pass temporal
  chains of next-frame flows outermost-first (latest step first).
* Coordinate maps are sampled with clamped bilinear interpolation;
  validity additionally requires the sampling point in bounds and all
  four support pixels valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateWarpError

__all__ = [
    "CorrespondenceField",
    "WarpSpec",
    "WarpPolicy",
    "ConsistencyMask",
    "identity_field",
    "realize_warp",
    "tps_displacement",
    "sample_warp",
    "warp_image",
    "warp_points",
    "compose",
    "integrate_flow",
    "forward_backward_mask",
    "invert_field",
    "field_to_entries",
    "entries_to_field",
    "downscale_field",
    "downscale_mask",
]

DEFAULT_FB_THRESHOLD = 5.0  # px


@dataclass
class CorrespondenceField:
    """Backward correspondence map between two equally sized frames.

    map:   (H, W, 2) float64, channels (x, y), source location per
           target pixel.
    valid: (H, W) bool, False where no correspondence is defined.
    """

    map: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.map.shape[0]

    @property
    def width(self) -> int:
        return self.map.shape[1]

    def copy(self) -> "CorrespondenceField":
        return CorrespondenceField(self.map.copy(), self.valid.copy())

    def check(self) -> None:
        """Raise ValueError on a malformed field. Not called on hot paths."""
        if self.map.ndim != 3 or self.map.shape[2] != 2:
            raise ValueError(f"map must be (H, W, 2), got {self.map.shape}")
        if self.valid.shape != self.map.shape[:2]:
            raise ValueError("valid mask shape does not match map")
        if self.valid.dtype != np.bool_:
            raise ValueError("valid mask must be boolean")
        if not np.all(np.isfinite(self.map[self.valid])):
            raise ValueError("map holds non-finite values on valid pixels")


@dataclass
class ConsistencyMask:
    """Per-pixel outcome of a forward–backward round-trip check.

    passed[p] True implies the round trip through both fields was valid
    and its offset at p was <= threshold pixels.
    """

    passed: np.ndarray
    threshold: float


@dataclass
class WarpSpec:
    """Parametric warp description, realizable at any resolution.

    kind "affine": ``affine`` is the forward 2x3 matrix in pixel
    coordinates (target = M @ source + t).

    kind "tps": ``control_points`` is an (R, C, 2) grid of normalized
    [0,1]^2 positions (R, C >= 2), ``displacements`` an (R, C, 2) array
    of pixel offsets. The realized backward map is
    ``p + interp(p)`` where interp is the thin-plate interpolant of the
    displacements (radial kernel U(r) = r^2 log r^2), so each control
    point maps its target location exactly displacement pixels off
    source.
    """

    kind: str
    affine: np.ndarray | None = None
    control_points: np.ndarray | None = None
    displacements: np.ndarray | None = None
    rng_seed: int = 0

    def check(self) -> None:
        if self.kind == "affine":
            if self.affine is None or np.asarray(self.affine).shape != (2, 3):
                raise ValueError("affine spec needs a 2x3 matrix")
        elif self.kind == "tps":
            cp = None if self.control_points is None else np.asarray(self.control_points)
            dp = None if self.displacements is None else np.asarray(self.displacements)
            if cp is None or cp.ndim != 3 or cp.shape[2] != 2:
                raise ValueError("tps control grid must be (R, C, 2)")
            if cp.shape[0] < 2 or cp.shape[1] < 2:
                raise ValueError("tps control grid must be at least 2x2")
            if np.min(cp) < 0.0 or np.max(cp) > 1.0:
                raise ValueError("tps control points must lie in [0,1]^2")
            if dp is None or dp.shape != cp.shape:
                raise ValueError("tps displacements must match the control grid")
        else:
            raise ValueError(f"unknown warp kind {self.kind!r}")


@dataclass
class WarpPolicy:
    """Sampling policy for random warps on a width x height canvas.

    Displacement magnitudes (TPS control offsets, affine translation)
    are drawn uniformly from [min_displacement, max_displacement] px
    with uniform direction; [0, 0] samples an identity-equivalent spec.
    """

    width: int
    height: int
    kind: str = "tps"
    grid_rows: int = 3
    grid_cols: int = 3
    min_displacement: float = 0.0
    max_displacement: float = 5.0
    rotation: float = 0.15          # radians, affine only
    scale_range: tuple = (0.9, 1.1)  # affine only


# ---------------------------------------------------------------------------
# bilinear sampling helpers


def _cell_indices(xs, ys, width, height):
    """Clamped 2x2 support cell per sampling point (align-corners grid).

    The cell is shifted inward at the far edges so all four taps index
    real pixels; fractional parts then reach 1.0 exactly at the border.
    """
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(height - 2, 0))
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    return x0, y0, fx, fy


def _gather_clamp(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample of (H, W[, C]) at float coords, clamped at edges."""
    h, w = arr.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0, y0, fx, fy = _cell_indices(xs, ys, w, h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def _gather_zero(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample where out-of-bounds taps contribute zero."""
    h, w = arr.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = None
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = wx * wy * inside
            vals = arr[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if arr.ndim == 3:
                weight = weight[..., None]
            term = vals * weight
            out = term if out is None else out + term
    return out


def _in_bounds(xs, ys, width, height):
    return (xs >= 0.0) & (xs <= width - 1.0) & (ys >= 0.0) & (ys <= height - 1.0)


def _support_valid(valid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """True where the point is in bounds and its four support pixels are
    all valid."""
    h, w = valid.shape
    ok = _in_bounds(xs, ys, w, h)
    x0, y0, _, _ = _cell_indices(np.clip(xs, 0, w - 1.0), np.clip(ys, 0, h - 1.0), w, h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    sup = valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    return ok & sup


def _pixel_grid(width: int, height: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


# ---------------------------------------------------------------------------
# constructors


def identity_field(width: int, height: int) -> CorrespondenceField:
    """Field mapping every pixel to itself; valid everywhere."""
    if width <= 0 or height <= 0:
        raise ValueError("field dimensions must be positive")
    return CorrespondenceField(_pixel_grid(width, height),
                               np.ones((height, width), dtype=bool))


def _tps_system(centers: np.ndarray) -> np.ndarray:
    n = centers.shape[0]
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    k = _tps_kernel_sq(d2)
    # light diagonal regularization keeps the solve stable without
    # visibly breaking interpolation (residual ~1e-10 * weight scale)
    k[np.diag_indices(n)] += 1e-10
    p = np.concatenate([np.ones((n, 1)), centers], axis=1)
    top = np.concatenate([k, p], axis=1)
    bot = np.concatenate([p.T, np.zeros((3, 3))], axis=1)
    return np.concatenate([top, bot], axis=0)


def _tps_kernel_sq(d2: np.ndarray) -> np.ndarray:
    """U as a function of squared radius: r^2 log r^2, U(0) = 0."""
    out = np.zeros_like(d2)
    nz = d2 > 0.0
    out[nz] = d2[nz] * np.log(d2[nz])
    return out


def _tps_fit(spec: WarpSpec, width: int, height: int):
    cp = np.asarray(spec.control_points, dtype=np.float64).reshape(-1, 2)
    dp = np.asarray(spec.displacements, dtype=np.float64).reshape(-1, 2)
    centers = cp * np.array([width - 1.0, height - 1.0])
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    if np.min(d2) < 1e-18:
        raise DegenerateWarpError("coincident thin-plate control points")
    n = centers.shape[0]
    rhs = np.concatenate([dp, np.zeros((3, 2))], axis=0)
    try:
        sol = np.linalg.solve(_tps_system(centers), rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise DegenerateWarpError(f"thin-plate system singular: {exc}") from exc
    return centers, sol[:n], sol[n:]


def tps_displacement(spec: WarpSpec, points: np.ndarray,
                     width: int, height: int) -> np.ndarray:
    """Continuous thin-plate displacement at arbitrary pixel positions.

    This is the same interpolant realize_warp evaluates on the pixel
    grid; tests use it to probe exactness at non-integer control points.
    """
    spec.check()
    if spec.kind != "tps":
        raise ValueError("tps_displacement requires a tps spec")
    centers, w, a = _tps_fit(spec, width, height)
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    d2 = np.sum((flat[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    u = _tps_kernel_sq(d2)
    disp = u @ w + a[0] + flat @ a[1:]
    return disp.reshape(pts.shape)


def realize_warp(spec: WarpSpec, width: int, height: int) -> CorrespondenceField:
    """Evaluate a warp spec into a dense backward field at the given size."""
    spec.check()
    if width <= 0 or height <= 0:
        raise ValueError("field dimensions must be positive")
    grid = _pixel_grid(width, height)
    if spec.kind == "affine":
        a = np.asarray(spec.affine, dtype=np.float64)
        m = a[:, :2]
        t = a[:, 2]
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if abs(det) < 1e-12:
            raise DegenerateWarpError("affine matrix is singular")
        minv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
        mapped = (grid - t) @ minv.T
    else:
        disp = tps_displacement(spec, grid, width, height)
        mapped = grid + disp
    return CorrespondenceField(mapped, np.ones((height, width), dtype=bool))


def sample_warp(rng: np.random.Generator, policy: WarpPolicy) -> WarpSpec:
    """Draw a random warp spec; deterministic given the generator state.

    The drawn child seed is recorded on the spec so a triplet can be
    reproduced from its spec alone.
    """
    if policy.min_displacement < 0 or policy.max_displacement < policy.min_displacement:
        raise ValueError("displacement bounds must satisfy 0 <= min <= max")
    seed = int(rng.integers(0, 2**31 - 1))
    local = np.random.Generator(np.random.PCG64(seed))
    if policy.kind == "tps":
        r, c = policy.grid_rows, policy.grid_cols
        if r < 2 or c < 2:
            raise ValueError("tps control grid must be at least 2x2")
        gy, gx = np.meshgrid(np.linspace(0.0, 1.0, r), np.linspace(0.0, 1.0, c),
                             indexing="ij")
        control = np.stack([gx, gy], axis=-1)
        mag = local.uniform(policy.min_displacement, policy.max_displacement, (r, c))
        ang = local.uniform(0.0, 2.0 * np.pi, (r, c))
        disp = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)
        return WarpSpec(kind="tps", control_points=control, displacements=disp,
                        rng_seed=seed)
    if policy.kind == "affine":
        theta = local.uniform(-policy.rotation, policy.rotation)
        scale = local.uniform(policy.scale_range[0], policy.scale_range[1])
        mag = local.uniform(policy.min_displacement, policy.max_displacement)
        ang = local.uniform(0.0, 2.0 * np.pi)
        shift = np.array([mag * np.cos(ang), mag * np.sin(ang)])
        m = scale * np.array([[np.cos(theta), -np.sin(theta)],
                              [np.sin(theta), np.cos(theta)]])
        center = np.array([(policy.width - 1) / 2.0, (policy.height - 1) / 2.0])
        t = center - m @ center + shift
        return WarpSpec(kind="affine", affine=np.concatenate([m, t[:, None]], axis=1),
                        rng_seed=seed)
    raise ValueError(f"unknown warp kind {policy.kind!r}")


# ---------------------------------------------------------------------------
# warping and composition


def warp_image(image: np.ndarray, field: CorrespondenceField,
               boundary: str = "zero") -> np.ndarray:
    """Pull an image through a field: out[p] = image[field.map[p]].

    boundary "zero": out-of-bounds taps contribute 0; "clamp": coords
    clamp to the border. Pixels with field.valid False come out 0.
    """
    if boundary not in ("zero", "clamp"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    if image.shape[:2] != (field.height, field.width):
        raise ValueError("image and field dimensions do not match")
    xs = field.map[..., 0]
    ys = field.map[..., 1]
    gather = _gather_zero if boundary == "zero" else _gather_clamp
    out = gather(image.astype(np.float64, copy=False), xs, ys)
    mask = field.valid if image.ndim == 2 else field.valid[..., None]
    return np.where(mask, out, 0.0)


def warp_points(points: np.ndarray, field: CorrespondenceField):
    """Transport points given in the field's domain to source positions.

    Returns (coords (N,2), ok (N,)). ok is False for points out of
    bounds or with any of the four support pixels invalid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs, ys = pts[:, 0], pts[:, 1]
    ok = _support_valid(field.valid, xs, ys)
    coords = _gather_clamp(field.map, np.clip(xs, 0, field.width - 1.0),
                           np.clip(ys, 0, field.height - 1.0))
    return coords, ok


def compose(f: CorrespondenceField, g: CorrespondenceField) -> CorrespondenceField:
    """Chain two lookups: out.map[p] = f.map(g.map[p]).

    Valid where g is valid, the intermediate point is inside f, and f's
    four support pixels there are valid.
    """
    if (f.height, f.width) != (g.height, g.width):
        raise ValueError("field dimensions do not match")
    xs = g.map[..., 0]
    ys = g.map[..., 1]
    mapped = _gather_clamp(f.map, np.clip(xs, 0, f.width - 1.0),
                           np.clip(ys, 0, f.height - 1.0))
    valid = g.valid & _support_valid(f.valid, xs, ys)
    return CorrespondenceField(mapped, valid)


def integrate_flow(chain) -> CorrespondenceField:
    """Left-fold of compose over a chain of fields.

    integrate_flow([a, b, c]).map = a.map ∘ b.map ∘ c.map: the LAST
    element's lookup runs first and fixes the composite's domain, so a
    temporal run of next-frame flows is passed latest-step-first. A
    singleton chain returns its element unchanged (no copy).
    """
    fields = list(chain)
    if not fields:
        raise ValueError("empty flow chain")
    acc = fields[0]
    for nxt in fields[1:]:
        acc = compose(acc, nxt)
    return acc


def forward_backward_mask(forward: CorrespondenceField,
                          backward: CorrespondenceField,
                          threshold: float = DEFAULT_FB_THRESHOLD) -> ConsistencyMask:
    """Round-trip check: p -> forward.map[p] -> backward lookup ~ p.

    passed is defined on forward's domain; threshold is the maximum
    round-trip offset in pixels.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if (forward.height, forward.width) != (backward.height, backward.width):
        raise ValueError("field dimensions do not match")
    xs = forward.map[..., 0]
    ys = forward.map[..., 1]
    ok = forward.valid & _support_valid(backward.valid, xs, ys)
    back = _gather_clamp(backward.map, np.clip(xs, 0, backward.width - 1.0),
                         np.clip(ys, 0, backward.height - 1.0))
    offset = np.linalg.norm(back - _pixel_grid(forward.width, forward.height), axis=-1)
    return ConsistencyMask(ok & (offset <= threshold), float(threshold))


def invert_field(field: CorrespondenceField) -> CorrespondenceField:
    """Approximate inverse by forward-splatting source coordinates.

    Each valid pixel p splats its own coordinates bilinearly around
    field.map[p]; accumulated coordinates are averaged, holes are filled
    from the nearest covered pixel, and pixels where no splat landed
    within 1 px are marked invalid.
    """
    h, w = field.height, field.width
    src = _pixel_grid(w, h).reshape(-1, 2)
    dst = field.map.reshape(-1, 2)
    keep = field.valid.reshape(-1)
    src, dst = src[keep], dst[keep]

    acc = np.zeros((h, w, 2))
    weight = np.zeros((h, w))
    near2 = np.full((h, w), np.inf)

    x0 = np.floor(dst[:, 0]).astype(np.int64)
    y0 = np.floor(dst[:, 1]).astype(np.int64)
    fx = dst[:, 0] - x0
    fy = dst[:, 1] - y0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            if not np.any(inside):
                continue
            ws = (wx * wy)[inside]
            xi, yi = xi[inside], yi[inside]
            flat = yi * w + xi
            np.add.at(acc.reshape(-1, 2), flat, src[inside] * ws[:, None])
            np.add.at(weight.reshape(-1), flat, ws)
            d2 = (dst[inside, 0] - xi) ** 2 + (dst[inside, 1] - yi) ** 2
            np.minimum.at(near2.reshape(-1), flat, d2)

    covered = (weight > 1e-12) & (near2 <= 1.0)
    values = np.zeros((h, w, 2))
    nz = weight > 1e-12
    values[nz] = acc[nz] / weight[nz][:, None]
    if not np.all(nz) and np.any(nz):
        # nearest-covered fill keeps the map usable everywhere; validity
        # still reports only pixels with a real splat nearby
        _, (iy, ix) = ndimage.distance_transform_edt(~nz, return_indices=True)
        values[~nz] = values[iy[~nz], ix[~nz]]
    return CorrespondenceField(values, covered)


# ---------------------------------------------------------------------------
# resolution pyramid helpers (feature-level equivariance needs fields at
# halved resolutions; coarse pixel i covers fine coordinate 2i + 0.5)


def downscale_field(field: CorrespondenceField, factor: int) -> CorrespondenceField:
    if factor == 1:
        return field
    h, w = field.height // factor, field.width // factor
    grid = _pixel_grid(w, h) * factor + (factor - 1) / 2.0
    xs = grid[..., 0]
    ys = grid[..., 1]
    mapped = (_gather_clamp(field.map, xs, ys) - (factor - 1) / 2.0) / factor
    valid = _support_valid(field.valid, xs, ys)
    return CorrespondenceField(mapped, valid)


def downscale_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Conservative mask pyramid: a coarse pixel passes only if its whole
    factor x factor block passes."""
    if factor == 1:
        return mask
    h, w = mask.shape[0] // factor, mask.shape[1] // factor
    blocks = mask[: h * factor, : w * factor].reshape(h, factor, w, factor)
    return blocks.all(axis=(1, 3))


# ---------------------------------------------------------------------------
# serialization (two f32 planes + u8 validity plane, container entries)


def field_to_entries(field: CorrespondenceField, prefix: str = "") -> dict:
    return {
        prefix + "map_x": field.map[..., 0].astype(np.float32),
        prefix + "map_y": field.map[..., 1].astype(np.float32),
        prefix + "valid": field.valid.astype(np.uint8),
    }


def entries_to_field(entries: dict, prefix: str = "") -> CorrespondenceField:
    mx = np.asarray(entries[prefix + "map_x"], dtype=np.float64)
    my = np.asarray(entries[prefix + "map_y"], dtype=np.float64)
    valid = np.asarray(entries[prefix + "valid"]).astype(bool)
    return CorrespondenceField(np.stack([mx, my], axis=-1), valid)
