"""Dataset directories.

Layout:
    manifest.txt        key=value generation parameters, sorted
    frames/00000.eqmp   per-frame tensors (image, labels, flows, pose)
    annotations.csv     clicks: frame,x,y,k,u1,u2,provenance (u may be empty)
    ann_extra.eqmp      per-frame annotation masks and keypoint pixels
    surface.eqmp        welded surface mesh plus keypoint surface targets
    digest.txt          content digest over everything above

A loaded dataset rebuilds the full Sequence (poses included), so flow
integration, propagation oracles, and re-rendering checks work the same
on a directory as on a freshly built dataset.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .annotations import AnnotationSet, Click, FrameAnnotation, annotate_sequence
from .container import read_container, write_container
from .errors import DataFormatError, NotFoundError
from .fields import entries_to_field, field_to_entries
from .puppet import PuppetConfig, PuppetPose, build_parts, keypoint_targets
from .sequences import Frame, RenderConfig, Sequence, render_sequence
from .surface import (GeodesicIndex, SurfaceMesh, UVMap, build_puppet_surface,
                      entries_to_mesh, mesh_to_entries)

__all__ = [
    "GenConfig",
    "Dataset",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "dataset_digest",
]


@dataclass
class GenConfig:
    resolution: int = 64
    length: int = 80
    seed: int = 0
    texture_seed: int = 7
    motion: float = 0.08
    clicks_per_frame: int = 100
    detail: float = 1.0
    scale: float = 1.0


@dataclass
class Dataset:
    config: GenConfig
    sequence: Sequence
    annotations: AnnotationSet
    mesh: SurfaceMesh
    kp_chart: np.ndarray            # (J,) surface chart per named joint
    kp_u: np.ndarray                # (J, 2) chart coordinates per joint
    charts: int
    root: Path | None = None
    _geo: GeodesicIndex | None = None

    @property
    def resolution(self) -> int:
        return self.config.resolution

    @property
    def geodesic_index(self) -> GeodesicIndex:
        if self._geo is None:
            self._geo = GeodesicIndex(self.mesh)
        return self._geo


def build_dataset(config: GenConfig) -> Dataset:
    puppet = PuppetConfig(detail=config.detail, scale=config.scale)
    render = RenderConfig(resolution=config.resolution, length=config.length,
                          seed=config.seed, texture_seed=config.texture_seed,
                          motion=config.motion, puppet=puppet)
    seq = render_sequence(render)
    click_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, 0xC11C])))
    ann = annotate_sequence(seq, click_rng,
                            clicks_per_frame=config.clicks_per_frame)
    mesh = build_puppet_surface(puppet)
    charts = max(p.chart for p in seq.parts)
    return Dataset(config, seq, ann, mesh,
                   kp_chart=np.asarray(seq.keypoints["chart"], dtype=np.int64),
                   kp_u=np.asarray(seq.keypoints["u"], dtype=np.float64),
                   charts=charts)


# ---------------------------------------------------------------------------
# persistence


def _manifest_text(ds: Dataset) -> str:
    pairs = {f.name: getattr(ds.config, f.name) for f in dc_fields(GenConfig)}
    pairs["charts"] = ds.charts
    pairs["frames"] = len(ds.sequence.frames)
    pairs["keypoints"] = int(ds.kp_chart.shape[0])
    return "".join(f"{k}={pairs[k]!r}\n" if isinstance(pairs[k], float)
                   else f"{k}={pairs[k]}\n" for k in sorted(pairs))


def _parse_manifest(text: str, path) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: bad manifest line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _pose_array(pose: PuppetPose) -> np.ndarray:
    return np.concatenate([[pose.root_xy[0], pose.root_xy[1], pose.root_angle],
                           pose.joint_angles]).astype(np.float32)


def _frame_entries(frame: Frame) -> dict:
    entries = {
        "image": frame.image.astype(np.float32),
        "part_mask": frame.part_mask.astype(np.int32),
        "uv": frame.gt_uv.u.astype(np.float32),
        "keypoints": frame.keypoints.astype(np.float32),
        "pose": _pose_array(frame.pose),
        "local_t": frame.local_t.astype(np.float32),
        "local_d": frame.local_d.astype(np.float32),
    }
    if frame.flow_next is not None:
        entries.update(field_to_entries(frame.flow_next, "flow_next/"))
        entries["covisible_next"] = frame.covisible_next.astype(np.uint8)
    if frame.flow_prev is not None:
        entries.update(field_to_entries(frame.flow_prev, "flow_prev/"))
    return entries


def _entries_frame(entries: dict, path) -> Frame:
    try:
        pose_raw = np.asarray(entries["pose"], dtype=np.float64)
        pose = PuppetPose(root_xy=pose_raw[:2].copy(),
                          root_angle=float(pose_raw[2]),
                          joint_angles=pose_raw[3:].copy())
        flow_next = flow_prev = covis = None
        if "flow_next/map_x" in entries:
            flow_next = entries_to_field(entries, "flow_next/")
            covis = np.asarray(entries["covisible_next"]).astype(bool)
        if "flow_prev/map_x" in entries:
            flow_prev = entries_to_field(entries, "flow_prev/")
        return Frame(
            image=np.asarray(entries["image"], dtype=np.float64),
            gt_uv=UVMap(chart=np.asarray(entries["part_mask"], dtype=np.int32),
                        u=np.asarray(entries["uv"], dtype=np.float64)),
            flow_next=flow_next, flow_prev=flow_prev, covisible_next=covis,
            keypoints=np.asarray(entries["keypoints"], dtype=np.float64),
            pose=pose,
            local_t=np.asarray(entries["local_t"], dtype=np.float64),
            local_d=np.asarray(entries["local_d"], dtype=np.float64),
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: frame file missing entry {exc}") from exc


def _float_cell(value: float) -> str:
    return repr(float(value))


def _annotations_csv(ann: AnnotationSet) -> str:
    buf = io.StringIO()
    buf.write("frame,x,y,k,u1,u2,provenance\n")
    for idx in sorted(ann.frames):
        for c in ann.frames[idx].clicks:
            u1 = _float_cell(c.u[0]) if c.has_uv else ""
            u2 = _float_cell(c.u[1]) if c.has_uv else ""
            buf.write(f"{idx},{_float_cell(c.x)},{_float_cell(c.y)},"
                      f"{c.chart},{u1},{u2},{c.provenance}\n")
    return buf.getvalue()


def _parse_annotations_csv(text: str, resolution: int, path) -> AnnotationSet:
    lines = text.splitlines()
    if not lines or lines[0] != "frame,x,y,k,u1,u2,provenance":
        raise DataFormatError(f"{path}: bad annotations header")
    out = AnnotationSet(resolution)
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DataFormatError(f"{path}:{ln}: expected 7 fields")
        fidx = int(parts[0])
        u = None
        if parts[4] != "" or parts[5] != "":
            u = np.array([float(parts[4]), float(parts[5])])
        click = Click(float(parts[1]), float(parts[2]), int(parts[3]), u,
                      provenance=parts[6])
        out.frames.setdefault(fidx, FrameAnnotation()).clicks.append(click)
    return out


def save_dataset(ds: Dataset, out_dir, force: bool = False) -> str:
    """Write the dataset directory; returns the content digest."""
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataFormatError(
            f"{root}: output directory is not empty (use force to overwrite)")
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text(_manifest_text(ds), encoding="utf-8")
    for idx, frame in enumerate(ds.sequence.frames):
        write_container(root / "frames" / f"{idx:05d}.eqmp",
                        _frame_entries(frame))
    (root / "annotations.csv").write_text(_annotations_csv(ds.annotations),
                                          encoding="utf-8")
    extra = {}
    for idx in sorted(ds.annotations.frames):
        ann = ds.annotations.frames[idx]
        if ann.part_mask is not None:
            extra[f"mask/{idx:05d}"] = ann.part_mask.astype(np.int32)
        if ann.keypoints is not None:
            extra[f"kp/{idx:05d}"] = ann.keypoints.astype(np.float32)
    write_container(root / "ann_extra.eqmp", extra)
    surface = mesh_to_entries(ds.mesh)
    surface["keypoints/chart"] = ds.kp_chart.astype(np.int32)
    surface["keypoints/u"] = ds.kp_u.astype(np.float32)
    write_container(root / "surface.eqmp", surface)
    digest = dataset_digest(root)
    (root / "digest.txt").write_text(digest + "\n", encoding="utf-8")
    return digest


def dataset_digest(root) -> str:
    """Content hash over every dataset file except the digest itself."""
    root = Path(root)
    h = hashlib.sha256()
    paths = sorted(p for p in root.rglob("*")
                   if p.is_file() and p.name != "digest.txt")
    if not paths:
        raise NotFoundError(f"{root}: no dataset files to digest")
    for p in paths:
        h.update(str(p.relative_to(root)).replace("\\", "/").encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.txt"
    if not manifest_path.is_file():
        raise NotFoundError(f"{root}: not a dataset (no manifest.txt)")
    raw = _parse_manifest(manifest_path.read_text(encoding="utf-8"),
                          manifest_path)
    try:
        config = GenConfig(
            resolution=int(raw["resolution"]), length=int(raw["length"]),
            seed=int(raw["seed"]), texture_seed=int(raw["texture_seed"]),
            motion=float(raw["motion"]),
            clicks_per_frame=int(raw["clicks_per_frame"]),
            detail=float(raw["detail"]), scale=float(raw["scale"]))
        charts = int(raw["charts"])
        n_frames = int(raw["frames"])
    except KeyError as exc:
        raise DataFormatError(f"{manifest_path}: missing key {exc}") from exc

    puppet = PuppetConfig(detail=config.detail, scale=config.scale)
    render = RenderConfig(resolution=config.resolution, length=config.length,
                          seed=config.seed, texture_seed=config.texture_seed,
                          motion=config.motion, puppet=puppet)
    parts = build_parts(puppet)
    frames = []
    for idx in range(n_frames):
        path = root / "frames" / f"{idx:05d}.eqmp"
        if not path.is_file():
            raise NotFoundError(f"{path}: missing frame file")
        frames.append(_entries_frame(read_container(path), path))

    surface_entries = read_container(root / "surface.eqmp")
    kp_chart = np.asarray(surface_entries.pop("keypoints/chart"), dtype=np.int64)
    kp_u = np.asarray(surface_entries.pop("keypoints/u"), dtype=np.float64)
    mesh = entries_to_mesh(surface_entries)

    ann = _parse_annotations_csv((root / "annotations.csv").read_text("utf-8"),
                                 config.resolution, root / "annotations.csv")
    extra = read_container(root / "ann_extra.eqmp")
    for name, arr in extra.items():
        kind, num = name.split("/", 1)
        fr = ann.frames.setdefault(int(num), FrameAnnotation())
        if kind == "mask":
            fr.part_mask = np.asarray(arr, dtype=np.int32)
        elif kind == "kp":
            fr.keypoints = np.asarray(arr, dtype=np.float64)
        else:
            raise DataFormatError(f"{root}/ann_extra.eqmp: entry {name!r}")

    seq = Sequence(config=render, parts=parts, frames=frames,
                   keypoints=keypoint_targets(parts))
    return Dataset(config, seq, ann, mesh, kp_chart, kp_u, charts, root=root)