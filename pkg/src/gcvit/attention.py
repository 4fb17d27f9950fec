"""Window partitioning, local and global window attention, the global query
generator and the block/stage assembly that alternates them."""

from __future__ import annotations

import math
from dataclasses import dataclass

from gcvit import nn
from gcvit import tensor as T
from gcvit.errors import ConfigError, ContractError, DimensionError
from gcvit.nn import Affine, FusedMBConvParams, MlpParams, Norm, ParamFactory, RelPosBias
from gcvit.tensor import Tensor


@dataclass(frozen=True)
class WindowGrid:
    B: int
    H: int
    W: int
    C: int
    h: int
    w: int

    def __post_init__(self):
        if self.H % self.h or self.W % self.w:
            raise DimensionError(
                f"window {self.h}x{self.w} does not tile feature map {self.H}x{self.W}")

    @property
    def N(self) -> int:
        return self.h * self.w

    @property
    def windows(self) -> int:
        return (self.H // self.h) * (self.W // self.w)

    @property
    def batch(self) -> int:
        return self.B * self.windows


@dataclass
class GlobalQuery:
    q: Tensor       # (B, F, N, C/F)
    stage: int | None = None


@dataclass
class AttnParams:
    kind: str                 # "local" or "global"
    heads: int
    proj: Affine
    rpb: RelPosBias
    qkv: Affine | None = None  # local only, C -> 3C
    kv: Affine | None = None   # global only, C -> 2C

    @property
    def dim(self) -> int:
        return self.proj.weight.shape[0]

    @property
    def scale(self) -> float:
        return (self.dim // self.heads) ** -0.5


@dataclass
class BlockParams:
    norm1: Norm
    attn: AttnParams
    norm2: Norm
    mlp: MlpParams

    @property
    def kind(self) -> str:
        return self.attn.kind


@dataclass
class GeneratorParams:
    blocks: list[FusedMBConvParams]
    window: int


@dataclass
class StageParams:
    generator: GeneratorParams
    blocks: list[BlockParams]
    window: int
    heads: int
    index: int = 0


# --------------------------------------------------------------------------- #
# Construction
# --------------------------------------------------------------------------- #


def generator_repeats(resolution: int, window: int, stage: int | None = None) -> int:
    """Number of Fused-MBConv + pool repeats taking ``resolution`` down to ``window``."""
    where = "" if stage is None else f" in stage {stage}"
    if window < 1 or resolution % window:
        raise ConfigError(f"window {window} does not divide resolution {resolution}{where}")
    ratio = resolution // window
    k = int(round(math.log2(ratio)))
    if 2 ** k != ratio:
        raise ConfigError(
            f"resolution/window ratio {ratio} is not a power of two{where}")
    return k


def init_attention(make: ParamFactory, prefix: str, dim: int, heads: int, window: int,
                   kind: str) -> AttnParams:
    if heads < 1 or dim % heads:
        raise ConfigError(f"{heads} heads do not divide width {dim} ({prefix})")
    rpb = nn.build_rel_pos_bias(window, heads, make, f"{prefix}.rpb")
    proj = nn.init_affine(make, f"{prefix}.proj", dim, dim)
    if kind == "local":
        return AttnParams(kind, heads, proj, rpb, qkv=nn.init_affine(make, f"{prefix}.qkv", dim, 3 * dim))
    if kind == "global":
        return AttnParams(kind, heads, proj, rpb, kv=nn.init_affine(make, f"{prefix}.kv", dim, 2 * dim))
    raise ConfigError(f"unknown attention kind {kind!r}")


def init_block(make: ParamFactory, prefix: str, dim: int, heads: int, window: int,
               kind: str, mlp_ratio: int) -> BlockParams:
    return BlockParams(nn.init_norm(make, f"{prefix}.norm1", dim),
                       init_attention(make, f"{prefix}.attn", dim, heads, window, kind),
                       nn.init_norm(make, f"{prefix}.norm2", dim),
                       nn.init_mlp(make, f"{prefix}.mlp", dim, mlp_ratio))


def block_kind(index: int) -> str:
    return "local" if index % 2 == 0 else "global"


def init_stage(make: ParamFactory, prefix: str, dim: int, depth: int, heads: int,
               window: int, mlp_ratio: int, resolution: int, index: int = 0) -> StageParams:
    k = generator_repeats(resolution, window, index)
    gen = GeneratorParams([nn.init_fused_mbconv(make, f"{prefix}.qgen.{i}", dim) for i in range(k)],
                          window)
    blocks = [init_block(make, f"{prefix}.blocks.{i}", dim, heads, window, block_kind(i), mlp_ratio)
              for i in range(depth)]
    return StageParams(gen, blocks, window, heads, index)


# --------------------------------------------------------------------------- #
# Windows
# --------------------------------------------------------------------------- #


def window_partition(x: Tensor, h: int, w: int) -> Tensor:
    """(B, H, W, C) -> (B * N*, h*w, C); windows row-major per image, images batch-major."""
    if x.ndim != 4:
        raise DimensionError(f"window_partition expects (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    WindowGrid(B, H, W, C, h, w)
    y = x.reshape(B, H // h, h, W // w, w, C).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(B * (H // h) * (W // w), h * w, C)


def window_reverse(xw: Tensor, grid: WindowGrid) -> Tensor:
    expected = (grid.batch, grid.N)
    if xw.ndim != 3 or xw.shape[:2] != expected:
        raise DimensionError(f"window_reverse expects {expected + (grid.C,)}, got {xw.shape}")
    C = xw.shape[2]
    y = xw.reshape(grid.B, grid.H // grid.h, grid.W // grid.w, grid.h, grid.w, C)
    return y.permute(0, 1, 3, 2, 4, 5).reshape(grid.B, grid.H, grid.W, C)


# --------------------------------------------------------------------------- #
# Attention
# --------------------------------------------------------------------------- #


def _check_window(xw: Tensor, p: AttnParams) -> tuple[int, int, int, int]:
    Bs, N, C = xw.shape
    if C != p.dim:
        raise ConfigError(f"attention width {p.dim} does not match tokens {xw.shape}")
    if C % p.heads:
        raise ConfigError(f"{p.heads} heads do not divide width {C}")
    if N != p.rpb.window ** 2:
        raise ConfigError(f"{N} tokens per window but bias table built for {p.rpb.window}x{p.rpb.window}")
    return Bs, N, C, C // p.heads


def _attend(q: Tensor, k: Tensor, v: Tensor, p: AttnParams, capture: dict | None) -> Tensor:
    # q, k, v: (B*, F, N, d)
    Bs, F, N, d = v.shape
    logits = T.matmul(q * p.scale, k.transpose(-2, -1)) + nn.lookup(p.rpb)
    attn = T.softmax(logits, axis=-1)
    if capture is not None:
        capture["attn"] = attn
    out = T.matmul(attn, v)
    if capture is not None:
        capture["heads_out"] = out
    return nn.affine(out.permute(0, 2, 1, 3).reshape(Bs, N, F * d), p.proj)


def local_attention(xw: Tensor, p: AttnParams, capture: dict | None = None) -> Tensor:
    if p.qkv is None:
        raise ConfigError("local attention needs a qkv projection")
    Bs, N, C, d = _check_window(xw, p)
    qkv = nn.affine(xw, p.qkv).reshape(Bs, N, 3, p.heads, d).permute(2, 0, 3, 1, 4)
    return _attend(qkv[0], qkv[1], qkv[2], p, capture)


def global_query_generator(x: Tensor, h: int, heads: int, params: GeneratorParams,
                           stage: int | None = None) -> GlobalQuery:
    """Distil a (B, C, H, W) stage input into per-image query tokens of window size h x h."""
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ConfigError(f"query generator needs square features, got {x.shape}")
    B, C, H, _ = x.shape
    k = generator_repeats(H, h, stage)
    if len(params.blocks) != k:
        raise ConfigError(
            f"generator for stage {stage} has {len(params.blocks)} blocks, needs {k}")
    if C % heads:
        raise ConfigError(f"{heads} heads do not divide width {C}")
    for blk in params.blocks:
        x = T.maxpool2d(nn.fused_mbconv(x, blk), 3, 2, 1)
    q = x.permute(0, 2, 3, 1).reshape(B, h * h, heads, C // heads).permute(0, 2, 1, 3)
    return GlobalQuery(q, stage)


def replicate_query(qg: GlobalQuery, batch: int) -> Tensor:
    """Repeat each image's query across its windows: (B, F, N, d) -> (B*, F, N, d)."""
    B, F, N, d = qg.q.shape
    if batch % B:
        raise DimensionError(f"aggregated batch {batch} is not a multiple of query batch {B}")
    rep = T.repeat(qg.q.reshape(B, 1, F, N, d), batch // B, axis=1)
    return rep.reshape(batch, F, N, d)


def global_attention(xw: Tensor, qg: GlobalQuery, p: AttnParams,
                     capture: dict | None = None) -> Tensor:
    if p.kv is None:
        raise ConfigError("global attention needs a kv projection")
    Bs, N, C, d = _check_window(xw, p)
    if qg.q.shape[1:] != (p.heads, N, d):
        raise DimensionError(
            f"global query {qg.q.shape} does not match ({p.heads}, {N}, {d}) head layout")
    kv = nn.affine(xw, p.kv).reshape(Bs, N, 2, p.heads, d).permute(2, 0, 3, 1, 4)
    q = replicate_query(qg, Bs)
    return _attend(q, kv[0], kv[1], p, capture)


def gcvit_block(x: Tensor, p: BlockParams, qg: GlobalQuery | None = None,
                capture: dict | None = None) -> Tensor:
    """Pre-norm transformer block over window tokens (B*, N, C)."""
    h = T.layer_norm(x, p.norm1.gamma, p.norm1.beta, nn.LN_EPS)
    if p.kind == "global":
        if qg is None:
            raise ContractError("global block called without a global query")
        h = global_attention(h, qg, p.attn, capture)
    else:
        h = local_attention(h, p.attn, capture)
    x = x + h
    return x + nn.mlp(T.layer_norm(x, p.norm2.gamma, p.norm2.beta, nn.LN_EPS), p.mlp)


def stage_forward(x: Tensor, stage: StageParams, taps: dict | None = None) -> Tensor:
    """Run one resolution level on a (B, C, H, W) map.

    The global query is computed once from the stage input; blocks alternate
    local (even index) and global (odd index). If ``taps`` is given, each
    block's attention weights are stored under ``"block{j}"``.
    """
    B, C, H, W = x.shape
    grid = WindowGrid(B, H, W, C, stage.window, stage.window)
    qg = global_query_generator(x, stage.window, stage.heads, stage.generator, stage.index)
    xw = window_partition(x.permute(0, 2, 3, 1), grid.h, grid.w)
    for j, blk in enumerate(stage.blocks):
        if blk.kind != block_kind(j):
            raise ConfigError(f"block {j} of stage {stage.index} is {blk.kind}, expected {block_kind(j)}")
        cap = {} if taps is not None else None
        xw = gcvit_block(xw, blk, qg, cap)
        if taps is not None:
            taps[f"block{j}"] = cap
    if taps is not None:
        taps["qg"] = qg
    return window_reverse(xw, grid).permute(0, 3, 1, 2)

