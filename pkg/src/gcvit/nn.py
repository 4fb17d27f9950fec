"""Parameterized building blocks: SE, modified Fused-MBConv, stem, downsampler, MLP,
and the relative position bias table.

Parameters live in small dataclasses of :class:`~gcvit.tensor.Tensor`. Every
``init_*`` helper takes a ``make(name, shape, kind)`` factory so the same
construction code serves real allocation, checkpoint loading and shape-only
cost accounting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from gcvit import tensor as T
from gcvit.errors import ConfigError, DimensionError
from gcvit.tensor import Tensor

LN_EPS = 1e-5
SE_RATIO = 4
DOWNSAMPLE_KINDS = ("gcvit", "conv_maxpool", "patch_merging")

# kind is one of "weight" (random), "bias" (zeros), "ones", "zeros"
ParamFactory = Callable[[str, tuple, str], Tensor]


def zeros_factory(name: str, shape: tuple, kind: str) -> Tensor:
    fill = np.ones if kind == "ones" else np.zeros
    return Tensor(fill(shape), requires_grad=True, name=name)


class ShapeOnly(NamedTuple):
    """Placeholder parameter used when only shapes are needed."""

    name: str
    shape: tuple
    kind: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def shape_factory(name: str, shape: tuple, kind: str) -> ShapeOnly:
    return ShapeOnly(name, tuple(shape), kind)


# --------------------------------------------------------------------------- #
# Parameter containers
# --------------------------------------------------------------------------- #


@dataclass
class Affine:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor


@dataclass
class Conv:
    weight: Tensor  # (out, in // groups, kh, kw)
    bias: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class SEParams:
    reduce: Affine
    expand: Affine
    ratio: int


@dataclass
class FusedMBConvParams:
    dw: Conv
    se: SEParams
    pw: Conv
    channels: int


@dataclass
class StemParams:
    conv: Conv
    norm: Norm
    block: FusedMBConvParams


@dataclass
class DownsampleParams:
    kind: str
    block: FusedMBConvParams | None = None
    conv: Conv | None = None
    norm: Norm | None = None
    merge: Affine | None = None


@dataclass
class MlpParams:
    fc1: Affine
    fc2: Affine
    ratio: int


@dataclass
class RelPosBias:
    table: Tensor            # ((2p-1)^2, heads)
    index_map: np.ndarray    # (p^2, p^2), int64
    window: int

    @property
    def heads(self) -> int:
        return self.table.shape[1]


# --------------------------------------------------------------------------- #
# Construction
# --------------------------------------------------------------------------- #


def init_affine(make: ParamFactory, prefix: str, fin: int, fout: int) -> Affine:
    return Affine(make(f"{prefix}.weight", (fin, fout), "weight"),
                  make(f"{prefix}.bias", (fout,), "bias"))


def init_norm(make: ParamFactory, prefix: str, width: int) -> Norm:
    return Norm(make(f"{prefix}.gamma", (width,), "ones"),
                make(f"{prefix}.beta", (width,), "zeros"))


def init_conv(make: ParamFactory, prefix: str, cin: int, cout: int, k: int,
              stride: int = 1, padding: int = 0, groups: int = 1) -> Conv:
    return Conv(make(f"{prefix}.weight", (cout, cin // groups, k, k), "weight"),
                make(f"{prefix}.bias", (cout,), "bias"), stride, padding, groups)


def init_se(make: ParamFactory, prefix: str, channels: int, ratio: int = SE_RATIO) -> SEParams:
    if ratio < 1 or channels % ratio:
        raise ConfigError(f"SE ratio {ratio} does not divide {channels} channels")
    hidden = channels // ratio
    return SEParams(init_affine(make, f"{prefix}.reduce", channels, hidden),
                    init_affine(make, f"{prefix}.expand", hidden, channels), ratio)


def init_fused_mbconv(make: ParamFactory, prefix: str, channels: int,
                      se_ratio: int = SE_RATIO) -> FusedMBConvParams:
    return FusedMBConvParams(
        dw=init_conv(make, f"{prefix}.dw", channels, channels, 3, 1, 1, groups=channels),
        se=init_se(make, f"{prefix}.se", channels, se_ratio),
        pw=init_conv(make, f"{prefix}.pw", channels, channels, 1),
        channels=channels,
    )


def init_stem(make: ParamFactory, prefix: str, channels: int, in_channels: int = 3) -> StemParams:
    return StemParams(init_conv(make, f"{prefix}.conv", in_channels, channels, 3, 2, 1),
                      init_norm(make, f"{prefix}.norm", channels),
                      init_fused_mbconv(make, f"{prefix}.block", channels))


def init_downsample(make: ParamFactory, prefix: str, channels: int, kind: str = "gcvit",
                    out_channels: int | None = None) -> DownsampleParams:
    """Parameters for a stride-2 reducer ``channels -> out_channels`` (default ``2 * channels``)."""
    out = 2 * channels if out_channels is None else out_channels
    if kind == "gcvit":
        return DownsampleParams(kind,
                                block=init_fused_mbconv(make, f"{prefix}.block", channels),
                                conv=init_conv(make, f"{prefix}.conv", channels, out, 3, 2, 1),
                                norm=init_norm(make, f"{prefix}.norm", out))
    if kind == "conv_maxpool":
        return DownsampleParams(kind, conv=init_conv(make, f"{prefix}.conv", channels, out, 3, 1, 1))
    if kind == "patch_merging":
        return DownsampleParams(kind, norm=init_norm(make, f"{prefix}.norm", 4 * channels),
                                merge=init_affine(make, f"{prefix}.merge", 4 * channels, out))
    raise ConfigError(f"unknown downsampler kind {kind!r}; expected one of {DOWNSAMPLE_KINDS}")


def init_mlp(make: ParamFactory, prefix: str, channels: int, ratio: int) -> MlpParams:
    hidden = int(ratio) * channels
    return MlpParams(init_affine(make, f"{prefix}.fc1", channels, hidden),
                     init_affine(make, f"{prefix}.fc2", hidden, channels), int(ratio))


def relative_index_map(p: int) -> np.ndarray:
    """Map each (query, key) token pair of a p x p window to its displacement bin."""
    coords = np.array([(r, c) for r in range(p) for c in range(p)], dtype=np.int64)
    delta = coords[:, None, :] - coords[None, :, :] + (p - 1)
    return delta[..., 0] * (2 * p - 1) + delta[..., 1]


def build_rel_pos_bias(p: int, heads: int, make: ParamFactory = zeros_factory,
                       prefix: str = "rpb") -> RelPosBias:
    if p < 1:
        raise ConfigError(f"window extent must be >= 1, got {p}")
    table = make(f"{prefix}.table", ((2 * p - 1) ** 2, heads), "zeros")
    return RelPosBias(table, relative_index_map(p), p)


# --------------------------------------------------------------------------- #
# Forward rules
# --------------------------------------------------------------------------- #


def affine(x: Tensor, p: Affine) -> Tensor:
    return T.linear(x, p.weight, p.bias)


def conv(x: Tensor, p: Conv) -> Tensor:
    return T.conv2d(x, p.weight, p.bias, p.stride, p.padding, p.groups)


def channel_norm(x: Tensor, p: Norm, eps: float = LN_EPS) -> Tensor:
    """Layer norm over the channel axis of a (B, C, H, W) map."""
    y = T.layer_norm(x.permute(0, 2, 3, 1), p.gamma, p.beta, eps)
    return y.permute(0, 3, 1, 2)


def squeeze_excitation(x: Tensor, p: SEParams) -> Tensor:
    B, C = x.shape[:2]
    if p.reduce.weight.shape[0] != C:
        raise ConfigError(f"SE expects {p.reduce.weight.shape[0]} channels, got {C}")
    pooled = T.mean(x, axis=(2, 3))
    gate = T.sigmoid(affine(T.gelu(affine(pooled, p.reduce)), p.expand))
    return x * gate.reshape(B, C, 1, 1)


def fused_mbconv(x: Tensor, p: FusedMBConvParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"fused_mbconv expects (B, {p.channels}, H, W), got {x.shape}")
    h = T.gelu(conv(x, p.dw))
    h = squeeze_excitation(h, p.se)
    return conv(h, p.pw) + x


def _require_even(x: Tensor, what: str) -> None:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"{what} needs even spatial extents, got {x.shape}")


def stem(image: Tensor, p: StemParams) -> Tensor:
    _require_even(image, "stem")
    return fused_mbconv(channel_norm(conv(image, p.conv), p.norm), p.block)


def merge_patches(x: Tensor) -> Tensor:
    """Concatenate each 2x2 neighbourhood into channels: (B,C,H,W) -> (B,H/2,W/2,4C).

    Order along the new channel axis is top-left, top-right, bottom-left,
    bottom-right, each a full block of C channels.
    """
    B, C, H, W = x.shape
    y = x.reshape(B, C, H // 2, 2, W // 2, 2)       # b c i r j s
    y = y.permute(0, 2, 4, 3, 5, 1)                 # b i j r s c
    return y.reshape(B, H // 2, W // 2, 4 * C)


def downsample(x: Tensor, p: DownsampleParams) -> Tensor:
    _require_even(x, "downsample")
    if p.kind == "gcvit":
        return channel_norm(conv(fused_mbconv(x, p.block), p.conv), p.norm)
    if p.kind == "conv_maxpool":
        return T.maxpool2d(conv(x, p.conv), 3, 2, 1)
    if p.kind == "patch_merging":
        y = affine(T.layer_norm(merge_patches(x), p.norm.gamma, p.norm.beta, LN_EPS), p.merge)
        return y.permute(0, 3, 1, 2)
    raise ConfigError(f"unknown downsampler kind {p.kind!r}")


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.fc1.weight.shape[0]:
        raise DimensionError(f"mlp expects width {p.fc1.weight.shape[0]}, got {x.shape}")
    return affine(T.gelu(affine(x, p.fc1)), p.fc2)


def lookup(rpb: RelPosBias) -> Tensor:
    """Gather the bias table into a (heads, p^2, p^2) tensor."""
    n = rpb.window ** 2
    gathered = T.take(rpb.table, rpb.index_map.reshape(-1))  # (n*n, F)
    return gathered.reshape(n, n, rpb.heads).permute(2, 0, 1)
