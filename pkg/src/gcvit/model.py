"""Variant presets, end-to-end assembly, initialization, checkpoints and a plain
gradient-descent training step."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from gcvit import attention as A
from gcvit import nn
from gcvit import tensor as T
from gcvit.blob import read_blob, write_blob
from gcvit.errors import ConfigError, DimensionError, FormatError
from gcvit.tensor import Tensor

INIT_STD = 0.02
INIT_BOUND = 2.0  # truncation in units of std
CONFIG_RECORD = "__config__"

# width -> heads per stage
_HEADS = {64: (2, 4, 8, 16), 96: (3, 6, 12, 24), 128: (4, 8, 16, 32), 192: (6, 12, 24, 48)}
_DEEP = (3, 4, 19, 5)
_WINDOWS_224 = (7, 7, 14, 7)


@dataclass(frozen=True)
class VariantConfig:
    name: str
    dim: int
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    windows: tuple[int, int, int, int]
    mlp_ratio: int
    num_classes: int = 1000
    resolution: int = 224
    downsampler: str = "gcvit"
    best_effort: bool = False

    def __post_init__(self):
        for f in ("depths", "heads", "windows"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))

    def stage_dims(self) -> list[int]:
        return [self.dim * 2 ** i for i in range(4)]

    def stage_resolutions(self) -> list[int]:
        return [self.resolution // 4 // 2 ** i for i in range(4)]

    def validate(self) -> "VariantConfig":
        if self.resolution % 32:
            raise ConfigError(f"resolution {self.resolution} must be a multiple of 32")
        if len(self.depths) != 4 or len(self.heads) != 4 or len(self.windows) != 4:
            raise ConfigError("depths, heads and windows need exactly 4 entries")
        if self.downsampler not in nn.DOWNSAMPLE_KINDS:
            raise ConfigError(f"unknown downsampler kind {self.downsampler!r}")
        if self.num_classes < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_classes and mlp_ratio must be positive")
        if self.dim % nn.SE_RATIO:
            raise ConfigError(f"base width {self.dim} must be divisible by SE ratio {nn.SE_RATIO}")
        for i, (d, f, w, r) in enumerate(zip(self.stage_dims(), self.heads, self.windows,
                                             self.stage_resolutions())):
            if self.depths[i] < 1:
                raise ConfigError(f"stage {i} depth must be >= 1")
            if f < 1 or d % f:
                raise ConfigError(f"stage {i}: {f} heads do not divide width {d}")
            A.generator_repeats(r, w, i)
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        missing = {"name", "dim", "depths", "heads", "windows", "mlp_ratio"} - set(known)
        if missing:
            raise ConfigError(f"config is missing fields {sorted(missing)}")
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "VariantConfig":
        return cls.from_dict(json.loads(text))


PRESETS: dict[str, VariantConfig] = {
    "xxt": VariantConfig("xxt", 64, (2, 2, 6, 2), _HEADS[64], _WINDOWS_224, 3),
    "xt": VariantConfig("xt", 64, (3, 4, 6, 5), _HEADS[64], _WINDOWS_224, 3),
    "t": VariantConfig("t", 64, _DEEP, _HEADS[64], _WINDOWS_224, 3),
    "t2": VariantConfig("t2", 64, (3, 4, 21, 5), _HEADS[64], _WINDOWS_224, 3, best_effort=True),
    "s": VariantConfig("s", 96, _DEEP, _HEADS[96], _WINDOWS_224, 2),
    "s2": VariantConfig("s2", 96, (3, 4, 21, 5), _HEADS[96], _WINDOWS_224, 2, best_effort=True),
    "b": VariantConfig("b", 128, _DEEP, _HEADS[128], _WINDOWS_224, 2),
    "l": VariantConfig("l", 192, _DEEP, _HEADS[192], _WINDOWS_224, 2),
    "toy": VariantConfig("toy", 8, (1, 1, 1, 1), (1, 1, 1, 1), (4, 4, 2, 1), 3,
                         num_classes=2, resolution=32),
}


def preset(name: str) -> VariantConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------------- #
# Model
# --------------------------------------------------------------------------- #


@dataclass
class Model:
    config: VariantConfig
    stem: nn.StemParams
    embed: nn.DownsampleParams          # stride-2 reduction to the first stage, width kept
    stages: list[A.StageParams]
    downsamplers: list[nn.DownsampleParams]
    norm: nn.Norm
    head: nn.Affine
    registry: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.registry.values())


def layout(config: VariantConfig, make: nn.ParamFactory) -> Model:
    """Assemble the parameter structure for ``config`` using factory ``make``.

    Every parameter is created through ``make`` exactly once and also recorded
    in the returned model's name-sorted registry.
    """
    config.validate()
    seen: dict[str, object] = {}

    def tracked(name, shape, kind):
        if name in seen:
            raise ConfigError(f"duplicate parameter name {name!r}")
        seen[name] = make(name, tuple(int(s) for s in shape), kind)
        return seen[name]

    C = config.dim
    dims, res = config.stage_dims(), config.stage_resolutions()
    stem = nn.init_stem(tracked, "stem", C)
    embed = nn.init_downsample(tracked, "embed", C, "gcvit", out_channels=C)
    stages = [A.init_stage(tracked, f"stages.{i}", dims[i], config.depths[i], config.heads[i],
                           config.windows[i], config.mlp_ratio, res[i], index=i)
              for i in range(4)]
    downs = [nn.init_downsample(tracked, f"downsample.{i}", dims[i], config.downsampler)
             for i in range(3)]
    norm = nn.init_norm(tracked, "norm", dims[3])
    head = nn.init_affine(tracked, "head", dims[3], config.num_classes)
    registry = {k: seen[k] for k in sorted(seen)}
    return Model(config, stem, embed, stages, downs, norm, head, registry)


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = INIT_STD,
                 bound: float = INIT_BOUND, out: np.ndarray | None = None) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +/- bound * std.

    Draws fill ``out`` in place when given (float64, C-contiguous).
    """
    z = np.empty(shape) if out is None else out
    rng.standard_normal(out=z)
    bad = np.flatnonzero(np.abs(z) > bound)
    flat = z.reshape(-1)
    while bad.size:
        flat[bad] = rng.standard_normal(bad.size)
        bad = bad[np.abs(flat[bad]) > bound]
    z *= std
    return z


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def build(config: VariantConfig, seed: int = 0) -> Model:
    """Allocate and initialize a model.

    Weights draw from a truncated normal in sorted-name order from a PCG64
    generator seeded with ``seed``; biases, norm shifts and bias tables start
    at zero, norm scales at one.
    """
    model = layout(config, nn.zeros_factory)
    rng = make_rng(seed)
    for name, t in model.registry.items():
        if name.endswith(".weight"):
            trunc_normal(rng, t.shape, out=t.data)
    return model


def with_overrides(config: VariantConfig, **kw) -> VariantConfig:
    return replace(config, **kw).validate()


# --------------------------------------------------------------------------- #
# Forward
# --------------------------------------------------------------------------- #


def forward(m: Model, images: Tensor, taps: dict | None = None) -> Tensor:
    """Images (B, 3, R, R) -> logits (B, num_classes).

    ``taps`` (optional) receives per-stage outputs under ``"stage{i}"`` and
    per-stage block captures under ``"stage{i}.blocks"``.
    """
    R = m.config.resolution
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (R, R):
        raise DimensionError(f"expected images of shape (B, 3, {R}, {R}), got {images.shape}")
    x = nn.stem(images, m.stem)
    x = nn.downsample(x, m.embed)
    for i, stage in enumerate(m.stages):
        stage_taps = {} if taps is not None else None
        x = A.stage_forward(x, stage, stage_taps)
        if taps is not None:
            taps[f"stage{i}"] = x
            taps[f"stage{i}.blocks"] = stage_taps
        if i < 3:
            x = nn.downsample(x, m.downsamplers[i])
    B, C = x.shape[:2]
    x = T.layer_norm(x.permute(0, 2, 3, 1), m.norm.gamma, m.norm.beta, nn.LN_EPS)
    pooled = T.mean(x, axis=(1, 2))
    logits = nn.affine(pooled, m.head)
    return T.check_finite(logits, "logits")


def train_step(m: Model, batch: Tensor, labels, lr: float) -> float:
    """One full-batch gradient-descent step on softmax cross-entropy; returns the loss."""
    with T.Tape():
        loss = T.cross_entropy(forward(m, batch), labels)
    if lr:
        grads = T.backward(loss, m.parameters())
        for p in m.parameters():
            p.data -= lr * grads[p].data
    return loss.item()


def predict(m: Model, batch: Tensor) -> np.ndarray:
    return np.argmax(forward(m, batch).data, axis=1)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def save(m: Model, path: str | os.PathLike, storage: str = "float64") -> None:
    meta = np.frombuffer(m.config.to_json().encode("utf-8"), dtype=np.uint8)
    arrays = {CONFIG_RECORD: meta}
    arrays.update((k, t.data) for k, t in m.registry.items())
    write_blob(path, arrays, storage)


def load(path: str | os.PathLike) -> Model:
    arrays = read_blob(path)
    meta = arrays.pop(CONFIG_RECORD, None)
    if meta is None:
        raise FormatError(f"checkpoint has no {CONFIG_RECORD!r} record")
    try:
        config = VariantConfig.from_json(bytes(meta).decode("utf-8"))
        config.validate()
    except (ValueError, TypeError, ConfigError) as exc:
        raise FormatError(f"embedded config is invalid: {exc}") from None

    def from_file(name, shape, kind):
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = arrays.pop(name)
        if tuple(arr.shape) != tuple(shape):
            raise FormatError(
                f"tensor {name!r} has shape {tuple(arr.shape)} but config requires {tuple(shape)}")
        t = Tensor._wrap(arr)
        t.requires_grad = True
        t.name = name
        return t

    model = layout(config, from_file)
    if arrays:
        raise FormatError(f"checkpoint has unexpected tensors {sorted(arrays)[:5]}")
    return model


def state_equal(a: Model, b: Model) -> bool:
    """Bit-exact registry comparison."""
    if list(a.registry) != list(b.registry):
        return False
    return all(np.array_equal(a.registry[k].data, b.registry[k].data) and
               a.registry[k].data.tobytes() == b.registry[k].data.tobytes()
               for k in a.registry)


__all__ = ["VariantConfig", "Model", "PRESETS", "preset", "layout", "build", "forward",
           "train_step", "predict", "save", "load", "state_equal", "trunc_normal"]
