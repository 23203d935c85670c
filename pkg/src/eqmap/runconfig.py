"""Run configuration files: sectioned key=value text, fully documented.

A config file has [data], [model], and [train] sections. Every key has
a documented default; omitted keys take it, unknown keys are refused.
Emitting and re-parsing a config reproduces it exactly (floats are
written with repr), which lets a persisted resolved config re-run a
command bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import os

from .datasetio import GenConfig
from .errors import NotFoundError, UsageError
from .model import ModelConfig
from .training import TrainConfig

__all__ = [
    "RunConfig",
    "SCHEMA",
    "emit_config",
    "parse_config",
    "load_config",
    "save_config",
    "set_key",
]


@dataclasses.dataclass
class RunConfig:
    data: GenConfig = dataclasses.field(default_factory=GenConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)


# (key, type, doc); order fixes the emitted layout
SCHEMA = {
    "data": [
        ("resolution", int, "square frame edge in pixels; divisible by 4"),
        ("length", int, "frames per rendered sequence"),
        ("seed", int, "seed for the pose trajectory and click sampling"),
        ("texture_seed", int, "seed for the shading pattern"),
        ("motion", float, "joint motion amplitude per frame"),
        ("clicks_per_frame", int, "annotated pixels sampled per frame"),
        ("detail", float, "surface mesh resolution multiplier"),
        ("scale", float, "figure size relative to the frame"),
    ],
    "model": [
        ("stages", int, "stacked refinement stages, 1..8"),
        ("features", int, "feature channels per stage"),
        ("charts", int, "surface charts; class count is charts + 1"),
    ],
    "train": [
        ("seed", int, "seed for batch order, warps, and pair choices"),
        ("epochs", int, "first-stage epochs"),
        ("stage2_epochs", int, "extra epochs after mixing in dataset two"),
        ("batch", int, "frames per mini-batch"),
        ("lr", float, "SGD learning rate"),
        ("momentum", float, "SGD momentum"),
        ("lr_decay_every", int, "epochs between lr decays; 0 = constant"),
        ("lr_decay_factor", float, "multiplier applied at each decay"),
        ("grad_clip", float, "global gradient-norm bound; 0 disables"),
        ("strategy", str, "baseline | gtprop | equiv | gtprop+equiv"),
        ("source", str, "second views: synthetic warps | real flow pairs"),
        ("level", str, "consistency-loss tap: 0..3, 4-all, 4-segm, 4-uv, none"),
        ("window", int, "largest frame gap for real pairs, 1..3"),
        ("fb_threshold", float, "round-trip rejection threshold in pixels"),
        ("noise_sigma", float, "smooth noise on real flow, pixels"),
        ("noise_outlier_frac", float, "fraction of flow pixels in outlier blocks"),
        ("noise_outlier_mag", float, "outlier displacement magnitude, pixels"),
        ("warp_grid", int, "control grid edge for synthetic warps"),
        ("warp_min_disp", float, "minimum control displacement, pixels"),
        ("warp_max_disp", float, "maximum control displacement, pixels"),
        ("chart_weight", float, "weight of the chart classification term"),
        ("uv_weight", float, "weight of the coordinate regression term"),
        ("keypoint_weight", float, "weight of the keypoint term"),
        ("equiv_weight", float, "weight of the consistency term"),
        ("prop_weight", float, "down-weight applied to transported clicks"),
        ("ann_scheme", str, "annotation reduction scheme; full keeps all"),
        ("ann_fraction", float, "scheme fraction in (0, 1]"),
        ("ann_seed", int, "seed for annotation reduction"),
        ("ann_keypoints", str, "keypoint labels: auto | on | off"),
        ("stage2_scheme", str, "reduction scheme for dataset two; same = reuse"),
        ("stage2_fraction", float, "fraction for dataset two; 0 = reuse"),
        ("eval_every", int, "epochs between eval rows; 0 = final only"),
        ("eval_frames", int, "eval-split frames scored per eval row"),
    ],
}

_TYPES = {"data": GenConfig, "model": ModelConfig, "train": TrainConfig}


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(config: RunConfig) -> str:
    """Render a config as documented key=value text."""
    lines = ["# run configuration: [section] headers, key = value lines,",
             "# full-line # comments; omitted keys take the defaults below"]
    for section, keys in SCHEMA.items():
        lines.append("")
        lines.append(f"[{section}]")
        sub = getattr(config, section)
        for key, _, doc in keys:
            lines.append(f"# {doc}")
            lines.append(f"{key} = {_format(getattr(sub, key))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    """Inverse of emit_config; tolerant of omissions, strict about keys."""
    known = {section: {key: kind for key, kind, _ in keys}
             for section, keys in SCHEMA.items()}
    values = {section: {} for section in SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise UsageError(f"unknown config section '[{section}]' "
                                 f"on line {lineno}")
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno} is not key = value: "
                             f"{line!r}")
        if section is None:
            raise UsageError(f"config key before any [section] on line "
                             f"{lineno}")
        key, _, rest = line.partition("=")
        key = key.strip()
        rest = rest.strip()
        if key not in known[section]:
            raise UsageError(f"unknown config key '{section}.{key}' "
                             f"on line {lineno}")
        if key in values[section]:
            raise UsageError(f"duplicate config key '{section}.{key}' "
                             f"on line {lineno}")
        values[section][key] = _parse_value(section, key, known[section][key],
                                            rest)
    return _build(values)


def _parse_value(section: str, key: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw, 10)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad {kind.__name__} for '{section}.{key}': "
                         f"{raw!r}") from None


def _build(values: dict) -> RunConfig:
    parts = {}
    for section, cls in _TYPES.items():
        try:
            parts[section] = cls(**values[section])
        except ValueError as exc:
            raise UsageError(f"invalid [{section}] config: {exc}") from None
    return RunConfig(**parts)


def set_key(config: RunConfig, dotted: str, raw: str) -> RunConfig:
    """Return a copy with one 'section.key' overridden from raw text."""
    section, _, key = dotted.partition(".")
    kinds = {k: kind for k, kind, _ in SCHEMA.get(section, [])}
    if not key or key not in kinds:
        raise UsageError(f"unknown config key {dotted!r}")
    value = _parse_value(section, key, kinds[key], raw)
    sub = getattr(config, section)
    try:
        sub = dataclasses.replace(sub, **{key: value})
    except ValueError as exc:
        raise UsageError(f"invalid {dotted}: {exc}") from None
    return dataclasses.replace(config, **{section: sub})


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise NotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(emit_config(config))
