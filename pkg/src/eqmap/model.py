"""Multi-stage convolutional chart/coordinate predictor.

Each stage is a fixed little encoder-decoder of 3x3 convolutions with
leaky rectifier nonlinearities: two 2x poolings down, two nearest
upsamplings back, then a feature tensor at input resolution feeding two
linear heads, one scoring the background-plus-charts classes and one
regressing two coordinate channels per chart. Later stages read the
previous stage's feature tensor, and every stage keeps its own heads so
losses can supervise all of them.

Parameters live in one flat float64 vector with a layout that is a pure
function of (stages, features, charts), which makes checkpoints and
finite-difference checks straightforward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .container import read_container, write_container
from .errors import DataFormatError
from .surface import UVMap

__all__ = [
    "ModelConfig",
    "Model",
    "Prediction",
    "LevelSelector",
    "layout",
    "param_count",
    "save_model",
    "load_model",
]

DOWNSAMPLE = 4      # two 2x poolings per stage
MAX_STAGES = 8


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 2
    features: int = 8
    charts: int = 10

    def __post_init__(self):
        if not (1 <= self.stages <= MAX_STAGES):
            raise ValueError(f"stages must be in 1..{MAX_STAGES}")
        if self.features < 1 or self.charts < 1:
            raise ValueError("features and charts must be positive")


def layout(config: ModelConfig):
    """Deterministic (name, shape, offset) list covering the flat vector."""
    f, k = config.features, config.charts
    out = []
    offset = 0

    def put(name, shape):
        nonlocal offset
        out.append((name, shape, offset))
        offset += int(np.prod(shape))

    for s in range(config.stages):
        cin = 1 if s == 0 else f
        for name, cout, cprev in (("conv0", f, cin), ("conv1", 2 * f, f),
                                  ("conv2", 2 * f, 2 * f), ("conv3", f, 2 * f),
                                  ("conv4", f, f), ("head_cls", k + 1, f),
                                  ("head_uv", 2 * k, f)):
            put(f"s{s}.{name}.w", (cout, cprev, 3, 3))
            put(f"s{s}.{name}.b", (cout,))
    return out


def param_count(config: ModelConfig) -> int:
    entries = layout(config)
    name, shape, offset = entries[-1]
    return offset + int(np.prod(shape))


@dataclass
class Prediction:
    scores: list                    # per stage, Node (B, K+1, H, W)
    uv: list                        # per stage, Node (B, 2K, H, W)
    taps: list                      # per stage, {level: Node} for levels 0..3
    leaves: dict                    # parameter name -> Node
    config: ModelConfig

    @property
    def batch(self) -> int:
        return self.scores[0].value.shape[0]


@dataclass(frozen=True)
class LevelSelector:
    """Which tensors the consistency loss attaches to.

    level None means no tensor is selected; level 4 targets the heads
    and `head` narrows it to class scores, coordinate channels, or both.
    """
    level: int | None = 3
    head: str = "all"

    def __post_init__(self):
        if self.level is not None and self.level not in (0, 1, 2, 3, 4):
            raise ValueError("level must be 0..4 or None")
        if self.head not in ("all", "segm", "uv"):
            raise ValueError("head must be all, segm, or uv")

    @classmethod
    def parse(cls, text: str) -> "LevelSelector":
        t = text.strip().lower()
        if t == "none":
            return cls(level=None)
        if t in ("4-all", "4-segm", "4-uv"):
            return cls(level=4, head=t.split("-", 1)[1])
        if t in ("0", "1", "2", "3", "4"):
            return cls(level=int(t))
        raise ValueError(f"bad level selector {text!r}")

    def name(self) -> str:
        if self.level is None:
            return "none"
        if self.level == 4:
            return f"4-{self.head}"
        return str(self.level)

    @property
    def scale_factor(self) -> int:
        # levels 1 and 2 live below input resolution
        return {0: 1, 1: 2, 2: 4, 3: 1, 4: 1}[self.level]

    def pick(self, pred: Prediction, stage: int) -> nn.Node:
        if self.level is None:
            raise ValueError("no level selected")
        if self.level < 4:
            return pred.taps[stage][self.level]
        if self.head == "segm":
            return pred.scores[stage]
        if self.head == "uv":
            return pred.uv[stage]
        return nn.concat_channels([pred.scores[stage], pred.uv[stage]])


class Model:
    def __init__(self, config: ModelConfig, params: np.ndarray | None = None):
        self.config = config
        self._layout = layout(config)
        n = param_count(config)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        model = cls(config)
        for name, shape, offset in model._layout:
            size = int(np.prod(shape))
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                model.params[offset:offset + size] = rng.normal(0.0, std, size)
        return model

    def view(self, name: str) -> np.ndarray:
        for n, shape, offset in self._layout:
            if n == name:
                size = int(np.prod(shape))
                return self.params[offset:offset + size].reshape(shape)
        raise KeyError(name)

    def make_leaves(self) -> dict:
        return {name: nn.leaf(self.params[offset:offset + int(np.prod(shape))]
                              .reshape(shape))
                for name, shape, offset in self._layout}

    def collect_grads(self, leaves: dict, grads: dict) -> np.ndarray:
        return nn.collect(leaves, grads, self._layout)

    def forward(self, images: np.ndarray, leaves: dict | None = None) -> Prediction:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        elif x.ndim != 4 or x.shape[1] != 1:
            raise ValueError("images must be (H,W), (B,H,W) or (B,1,H,W)")
        h, w = x.shape[2], x.shape[3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"spatial dimensions must be divisible by {DOWNSAMPLE}")
        if leaves is None:
            leaves = self.make_leaves()

        def block(name, tensor):
            return nn.leaky_relu(nn.conv3(tensor, leaves[name + ".w"],
                                          leaves[name + ".b"]))

        pred = Prediction([], [], [], leaves, self.config)
        current = nn.Node(x)
        for s in range(self.config.stages):
            p = f"s{s}."
            t0 = block(p + "conv0", current)
            t1 = block(p + "conv1", nn.avgpool2(t0))
            t2 = block(p + "conv2", nn.avgpool2(t1))
            t3 = block(p + "conv3", nn.upsample2(t2))
            psi = block(p + "conv4", nn.upsample2(t3))
            scores = nn.conv3(psi, leaves[p + "head_cls.w"], leaves[p + "head_cls.b"])
            uv = nn.conv3(psi, leaves[p + "head_uv.w"], leaves[p + "head_uv.b"])
            pred.taps.append({0: t0, 1: t1, 2: t2, 3: psi})
            pred.scores.append(scores)
            pred.uv.append(uv)
            current = psi
        return pred

    def decode(self, pred: Prediction, index: int = 0) -> UVMap:
        """Final-stage argmax chart plus that chart's clamped coordinates."""
        scores = pred.scores[-1].value[index]
        uv = pred.uv[-1].value[index]
        k = np.argmax(scores, axis=0).astype(np.int32)
        u = np.zeros(k.shape + (2,))
        fg = k > 0
        if np.any(fg):
            ch = 2 * (k[fg] - 1)
            ys, xs = np.nonzero(fg)
            u[fg, 0] = uv[ch, ys, xs]
            u[fg, 1] = uv[ch + 1, ys, xs]
            u = np.clip(u, 0.0, 1.0)
        return UVMap(chart=k, u=u)

    def predict(self, image: np.ndarray) -> UVMap:
        return self.decode(self.forward(image))


def save_model(path, model: Model) -> None:
    lines = "\n".join(f"{name} {' '.join(str(d) for d in shape)}"
                      for name, shape, offset in model._layout)
    write_container(path, {
        "model/stages": np.array([model.config.stages], dtype=np.int32),
        "model/features": np.array([model.config.features], dtype=np.int32),
        "model/charts": np.array([model.config.charts], dtype=np.int32),
        "model/params": model.params.astype(np.float32),
        "model/layout": np.frombuffer(lines.encode("utf-8"), dtype=np.uint8),
    })


def load_model(path) -> Model:
    entries = read_container(path)
    try:
        config = ModelConfig(stages=int(entries["model/stages"][0]),
                             features=int(entries["model/features"][0]),
                             charts=int(entries["model/charts"][0]))
        params = entries["model/params"]
        stored = bytes(entries["model/layout"]).decode("utf-8")
    except KeyError as exc:
        raise DataFormatError(f"checkpoint missing entry {exc}") from exc
    expected = "\n".join(f"{name} {' '.join(str(d) for d in shape)}"
                         for name, shape, offset in layout(config))
    if stored != expected:
        raise DataFormatError("checkpoint layout does not match its config")
    if params.shape != (param_count(config),):
        raise DataFormatError(
            f"checkpoint has {params.shape[0]} parameters, "
            f"config needs {param_count(config)}")
    return Model(config, params.astype(np.float64))