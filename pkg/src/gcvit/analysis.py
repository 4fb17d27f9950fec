"""Cost accounting, the closed-form attention complexity, gradient audits and
interpretability maps (global attention saliency, Grad-CAM)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from gcvit import attention as A
from gcvit import model as M
from gcvit import nn
from gcvit import tensor as T
from gcvit.errors import ContractError, DimensionError
from gcvit.tensor import Tensor

# --------------------------------------------------------------------------- #
# Cost report
# --------------------------------------------------------------------------- #


@dataclass
class LayerCost:
    name: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    """Per-layer parameter and MAC tallies.

    ``attention_macs`` holds the attention-only MACs of each stage (projections
    plus score and apply products of every block). ``eq3`` holds the
    closed-form per-local-block value for each stage, and ``local_block_macs``
    the counted MACs of one local attention module at that stage, so the two
    can be compared directly.
    """

    variant: str
    resolution: int
    batch: int
    records: list[LayerCost] = field(default_factory=list)
    attention_macs: list[int] = field(default_factory=list)
    local_block_macs: list[int] = field(default_factory=list)
    global_block_macs: list[int] = field(default_factory=list)
    eq3: list[int] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.records)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(total_params=self.params, total_macs=self.macs, total_flops_2x=2 * self.macs)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        width = max([len(r.name) for r in self.records] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>16}"]
        lines += [f"{r.name:<{width}}  {r.params:>12,d}  {r.macs:>16,d}" for r in self.records]
        lines.append(f"{'total':<{width}}  {self.params:>12,d}  {self.macs:>16,d}")
        return "\n".join(lines)


def eq3_complexity(H: int, W: int, C: int, h: int, w: int) -> int:
    """Closed-form cost of windowed attention on an H x W x C map: 2HW(2C^2 + hwC)."""
    for v in (H, W, C, h, w):
        if v < 1:
            raise ValueError("eq3_complexity needs positive arguments")
    return 2 * H * W * (2 * C * C + h * w * C)


def local_attention_macs(H: int, W: int, C: int, h: int, w: int) -> int:
    """Analytic MACs of one local attention module: qkv, scores, apply, proj."""
    tokens = H * W
    return tokens * C * 3 * C + 2 * tokens * h * w * C + tokens * C * C


def global_attention_macs(H: int, W: int, C: int, h: int, w: int) -> int:
    """As :func:`local_attention_macs` but with a kv projection only (no query map)."""
    tokens = H * W
    return tokens * C * 2 * C + 2 * tokens * h * w * C + tokens * C * C


class _Walker:
    """Shape-level mirror of :func:`gcvit.model.forward` that tallies MACs."""

    def __init__(self, batch: int):
        self.B = batch
        self.macs: dict[str, int] = {}

    def add(self, name: str, macs: int) -> None:
        self.macs[name] = self.macs.get(name, 0) + int(macs)

    def conv(self, name, cin, cout, k, out_hw, groups=1):
        self.add(name, cout * (cin // groups) * k * k * out_hw * out_hw * self.B)

    def affine(self, name, rows, fin, fout):
        self.add(name, rows * fin * fout)

    def fused_mbconv(self, prefix, C, r):
        self.conv(f"{prefix}.dw", C, C, 3, r, groups=C)
        self.affine(f"{prefix}.se.reduce", self.B, C, C // nn.SE_RATIO)
        self.affine(f"{prefix}.se.expand", self.B, C // nn.SE_RATIO, C)
        self.conv(f"{prefix}.pw", C, C, 1, r)

    def downsample(self, prefix, kind, C, out, r):
        if kind == "gcvit":
            self.fused_mbconv(f"{prefix}.block", C, r)
            self.conv(f"{prefix}.conv", C, out, 3, r // 2)
        elif kind == "conv_maxpool":
            self.conv(f"{prefix}.conv", C, out, 3, r)
        else:
            self.affine(f"{prefix}.merge", self.B * (r // 2) ** 2, 4 * C, out)

    def attention(self, prefix, kind, C, r, w, mlp_ratio):
        rows = self.B * r * r
        proj = "qkv" if kind == "local" else "kv"
        self.affine(f"{prefix}.attn.{proj}", rows, C, (3 if kind == "local" else 2) * C)
        self.add(f"{prefix}.attn.scores", rows * w * w * C)
        self.add(f"{prefix}.attn.apply", rows * w * w * C)
        self.affine(f"{prefix}.attn.proj", rows, C, C)
        self.affine(f"{prefix}.mlp.fc1", rows, C, mlp_ratio * C)
        self.affine(f"{prefix}.mlp.fc2", rows, mlp_ratio * C, C)


def _group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def _as_config(target) -> M.VariantConfig:
    return target.config if isinstance(target, M.Model) else target


def param_count(target) -> CostReport:
    """Exact learnable-scalar count per layer for a :class:`Model` or a config."""
    return cost_report(target, with_macs=False)


def mac_count(target, resolution: int | None = None, batch: int = 1) -> CostReport:
    """Per-layer multiply-accumulate tally without executing the network."""
    return cost_report(target, resolution, batch)


def cost_report(target, resolution: int | None = None, batch: int = 1,
                with_macs: bool = True) -> CostReport:
    cfg = _as_config(target)
    if resolution is not None and resolution != cfg.resolution:
        cfg = M.with_overrides(cfg, resolution=resolution)
    if isinstance(target, M.Model) and cfg is target.config:
        registry = target.registry
    else:
        registry = M.layout(cfg, nn.shape_factory).registry

    params: dict[str, int] = {}
    for name, t in registry.items():
        params[_group(name)] = params.get(_group(name), 0) + int(np.prod(t.shape))

    report = CostReport(cfg.name, cfg.resolution, batch)
    if with_macs:
        wk = _Walker(batch)
        R, C = cfg.resolution, cfg.dim
        dims, res = cfg.stage_dims(), cfg.stage_resolutions()
        wk.conv("stem.conv", 3, C, 3, R // 2)
        wk.fused_mbconv("stem.block", C, R // 2)
        wk.downsample("embed", "gcvit", C, C, R // 2)
        for i in range(4):
            d, r, w = dims[i], res[i], cfg.windows[i]
            for g in range(A.generator_repeats(r, w, i)):
                wk.fused_mbconv(f"stages.{i}.qgen.{g}", d, r // 2 ** g)
            for j in range(cfg.depths[i]):
                wk.attention(f"stages.{i}.blocks.{j}", A.block_kind(j), d, r, w, cfg.mlp_ratio)
            if i < 3:
                wk.downsample(f"downsample.{i}", cfg.downsampler, d, 2 * d, r)
        wk.affine("head", batch, dims[3], cfg.num_classes)
        macs = wk.macs

        for i in range(4):
            d, r, w = dims[i], res[i], cfg.windows[i]
            att = sum(v for k, v in macs.items()
                      if k.startswith(f"stages.{i}.blocks.") and ".attn." in k)
            report.attention_macs.append(att)
            report.local_block_macs.append(batch * local_attention_macs(r, r, d, w, w))
            report.global_block_macs.append(batch * global_attention_macs(r, r, d, w, w))
            report.eq3.append(eq3_complexity(r, r, d, w, w))
    else:
        macs = {}

    names = list(macs) + [k for k in params if k not in macs]
    report.records = [LayerCost(n, params.get(n, 0), macs.get(n, 0)) for n in names]
    return report


def instrumented_macs(m: M.Model, images: Tensor) -> int:
    """MACs actually executed by matmul/conv2d during one forward pass."""
    with T.count_macs() as counter:
        M.forward(m, images)
    return counter.total


def measure_local_attention(H: int, W: int, C: int, h: int, w: int, heads: int = 1,
                            kind: str = "local", seed: int = 0) -> int:
    """Run one attention module on random windows of an H x W x C map and count MACs."""
    rng = np.random.default_rng(seed)
    make = _random_factory(rng, 0.1)
    if h != w:
        raise DimensionError("only square windows are supported")
    p = A.init_attention(make, "probe", C, heads, h, kind)
    x = Tensor(rng.standard_normal((1, H, W, C)))
    xw = A.window_partition(x, h, w)
    with T.count_macs() as counter:
        if kind == "local":
            A.local_attention(xw, p)
        else:
            q = Tensor(rng.standard_normal((1, heads, h * w, C // heads)))
            A.global_attention(xw, A.GlobalQuery(q), p)
    return counter.total


# --------------------------------------------------------------------------- #
# Gradient audit
# --------------------------------------------------------------------------- #


@dataclass
class AuditResult:
    group: str
    max_rel_err: float    # over resolvable coordinates
    checked: int
    noise_limited: int    # coordinates whose finite difference cannot resolve ``tol``
    worst: tuple = ()
    passed: bool = True


@dataclass
class AuditReport:
    eps: float
    tol: float
    results: list[AuditResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.results)

    @property
    def noise_limited(self) -> int:
        return sum(r.noise_limited for r in self.results)

    def failures(self) -> list[AuditResult]:
        return [r for r in self.results if not r.passed]

    def to_table(self) -> str:
        lines = []
        for r in self.results:
            flag = "PASS" if r.passed else "FAIL"
            where = "" if r.passed else f"  worst (index, analytic, numeric) = {r.worst}"
            lines.append(f"{flag}  {r.group:<40} max_rel_err={r.max_rel_err:.3e}  "
                         f"n={r.checked} noise_limited={r.noise_limited}{where}")
        return "\n".join(lines)


NOISE_FACTOR = 4.0
RESOLVABLE = 1e-6   # finite differences with a smaller relative error estimate are trusted


def gradient_audit(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                   tol: float = 1e-6, samples: int | None = None, seed: int = 0) -> AuditReport:
    """Compare tape gradients with central finite differences.

    The probe loss is ``sum(fn() * R)`` with ``R`` a fixed standard-normal
    tensor drawn from ``seed``; weighting avoids the structural zero gradients
    a plain sum has through softmax rows.

    For each coordinate the relative error is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-12)`` with ``fd`` the central
    difference at ``eps``. A second difference at ``eps / 2`` estimates the
    error of ``fd`` itself (never taken below the rounding floor
    ``machine_eps * sum|R * out| / eps``). Coordinates whose estimate is at most
    ``RESOLVABLE * |fd|`` must meet ``tol``; the rest are noise-limited (float64
    cannot resolve them that finely) and pass if they meet ``tol`` or agree
    within ``NOISE_FACTOR`` times the estimate. ``max_rel_err`` is reported over
    the resolvable coordinates.

    Args:
        fn: Zero-argument callable whose output depends on ``params`` (read at
            call time, so in-place perturbations are seen).
        params: Named tensors to audit; each is one report group.
        eps: Finite-difference half step.
        tol: Maximum accepted relative error.
        samples: Coordinates checked per tensor; ``None`` checks all.
        seed: Seeds both the probe weights and the coordinate sampling.
    """
    rng = np.random.default_rng(seed)
    tracked = list(params.items())
    saved = {n: t.requires_grad for n, t in tracked}
    for _, t in tracked:
        t.requires_grad = True
    try:
        with T.Tape():
            out = fn()
            weights = Tensor(rng.standard_normal(out.shape))
            loss = T.sum_(out * weights)
        grads = T.backward(loss, [t for _, t in tracked])
    finally:
        for n, t in tracked:
            t.requires_grad = saved[n]
    wd = weights.data
    # rounding floor of a central difference on this output
    floor = np.finfo(np.float64).eps * float(np.sum(np.abs(wd * out.data))) / eps

    def central(flat, c, h):
        old = flat[c]
        flat[c] = old + h
        plus = fn().data
        flat[c] = old - h
        minus = fn().data
        flat[c] = old
        # difference elementwise first: untouched outputs cancel exactly
        return float(np.sum((plus - minus) * wd)) / (2 * h)

    report = AuditReport(eps, tol)
    for name, t in tracked:
        g = grads[t].data.reshape(-1)
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        worst, where, limited, ok = 0.0, (), 0, True
        for c in coords:
            fd = central(flat, c, eps)
            noise = max(abs(fd - central(flat, c, eps / 2)), floor)
            an = float(g[c])
            err = abs(an - fd)
            rel = err / max(abs(an), abs(fd), 1e-12)
            if noise > RESOLVABLE * abs(fd):
                limited += 1
                if rel > tol and err > NOISE_FACTOR * noise:
                    ok = False
                    where = (int(c), an, fd)
                continue
            if rel > worst:
                worst = rel
                if ok:
                    where = (int(c), an, fd)
        report.results.append(
            AuditResult(name, worst, len(coords), limited, where, ok and worst <= tol))
    return report


def _random_factory(rng: np.random.Generator, scale: float = 0.5):
    def make(name, shape, kind):
        if kind == "ones":
            data = 1.0 + scale * rng.standard_normal(shape)
        else:
            data = scale * rng.standard_normal(shape)
        return Tensor(data, requires_grad=True, name=name)
    return make


def _collect(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten the Tensors inside nested parameter dataclasses/lists."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[obj.name or prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(_collect(v, f"{prefix}.{i}"))
    elif hasattr(obj, "__dataclass_fields__"):
        for f in obj.__dataclass_fields__:
            out.update(_collect(getattr(obj, f), f"{prefix}.{f}"))
    return out


def block_audit_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """Small instances of every block family, with random O(1) parameters."""
    rng = np.random.default_rng(seed)
    make = _random_factory(rng)
    cases = {}

    def x_of(*shape):
        return Tensor(rng.standard_normal(shape), name="x")

    x = x_of(1, 4, 4, 4)
    se = nn.init_se(make, "se", 4, 2)
    cases["squeeze_excitation"] = (lambda: nn.squeeze_excitation(x, se), {"x": x, **_collect(se)})

    x1 = x_of(1, 4, 8, 8)
    fm = nn.init_fused_mbconv(make, "fmb", 4)
    cases["fused_mbconv"] = (lambda: nn.fused_mbconv(x1, fm), {"x": x1, **_collect(fm)})

    img = x_of(1, 3, 8, 8)
    st = nn.init_stem(make, "stem", 4)
    cases["stem"] = (lambda: nn.stem(img, st), {"image": img, **_collect(st)})

    for kind in nn.DOWNSAMPLE_KINDS:
        xd = x_of(1, 4, 6, 6)
        dp = nn.init_downsample(make, f"down_{kind}", 4, kind)
        cases[f"downsample[{kind}]"] = (lambda xd=xd, dp=dp: nn.downsample(xd, dp),
                                        {"x": xd, **_collect(dp)})

    xm = x_of(3, 5, 4)
    mp = nn.init_mlp(make, "mlp", 4, 2)
    cases["mlp"] = (lambda: nn.mlp(xm, mp), {"x": xm, **_collect(mp)})

    rpb = nn.build_rel_pos_bias(2, 2, make, "rpb")
    logits = x_of(3, 2, 4, 4)
    vals = x_of(3, 2, 4, 3)
    cases["rpb_lookup"] = (lambda: T.matmul(T.softmax(logits + nn.lookup(rpb)), vals),
                           {"rpb.table": rpb.table})

    xw = x_of(4, 4, 4)
    la = A.init_attention(make, "local", 4, 2, 2, "local")
    cases["local_attention"] = (lambda: A.local_attention(xw, la), {"x": xw, **_collect(la)})

    xg = x_of(1, 4, 4, 4)
    gen = A.GeneratorParams([nn.init_fused_mbconv(make, "qgen.0", 4)], 2)
    cases["global_query_generator"] = (lambda: A.global_query_generator(xg, 2, 2, gen).q,
                                       {"x": xg, **_collect(gen)})

    xw2 = x_of(4, 4, 4)
    qg = A.GlobalQuery(x_of(1, 2, 4, 2))
    ga = A.init_attention(make, "global", 4, 2, 2, "global")
    cases["global_attention"] = (lambda: A.global_attention(xw2, qg, ga),
                                 {"x": xw2, "q_g": qg.q, **_collect(ga)})

    xb = x_of(4, 4, 4)
    qb = A.GlobalQuery(x_of(1, 2, 4, 2))
    bl = A.init_block(make, "block_local", 4, 2, 2, "local", 2)
    bg = A.init_block(make, "block_global", 4, 2, 2, "global", 2)
    cases["gcvit_block"] = (lambda: A.gcvit_block(A.gcvit_block(xb, bl, qb), bg, qb),
                            {"x": xb, "q_g": qb.q, **_collect(bl), **_collect(bg)})
    return cases


def audit_blocks(eps: float = 1e-5, tol: float = 1e-6, seed: int = 0) -> dict[str, AuditReport]:
    return {name: gradient_audit(fn, params, eps, tol, seed=seed)
            for name, (fn, params) in block_audit_cases(seed).items()}


def audit_model(m: M.Model, images: Tensor, eps: float = 1e-5, tol: float = 1e-4,
                samples: int = 1, seed: int = 0) -> AuditReport:
    """Finite-difference audit of ``samples`` coordinates of every model parameter."""
    return gradient_audit(lambda: M.forward(m, images), m.registry, eps, tol, samples, seed)


# --------------------------------------------------------------------------- #
# Heatmaps
# --------------------------------------------------------------------------- #


@dataclass
class Heatmap:
    data: np.ndarray             # (H, W) in [0, 1]
    stage: int
    block: int | None
    kind: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def argmax(self) -> tuple[int, int]:
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.data), self.data.shape))

    def argmin(self) -> tuple[int, int]:
        return tuple(int(v) for v in np.unravel_index(np.argmin(self.data), self.data.shape))


def normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def upsample_bilinear(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array, edges clamped."""
    h, w = a.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def saliency_from_attention(attn: np.ndarray, grid: A.WindowGrid) -> np.ndarray:
    """Per-key saliency map (H, W) from attention weights (B*, F, N, N) of image 0.

    Weights are averaged over heads and query positions, giving one value per
    key token, then windows are stitched back in window_reverse order.
    """
    per_key = attn.mean(axis=(1, 2))                     # (B*, N)
    one = A.WindowGrid(1, grid.H, grid.W, 1, grid.h, grid.w)
    xw = Tensor(per_key[:one.batch, :, None])
    return A.window_reverse(xw, one).data[0, :, :, 0]


def _image_batch(image: Tensor) -> Tensor:
    if image.ndim == 3:
        return image.reshape(1, *image.shape)
    if image.ndim != 4 or image.shape[0] != 1:
        raise DimensionError(f"expected a single image (3, R, R) or (1, 3, R, R), got {image.shape}")
    return image


def attention_map(m: M.Model, image: Tensor, stage: int, block: int) -> Heatmap:
    if not 0 <= stage < 4 or not 0 <= block < m.config.depths[stage]:
        raise ContractError(f"no block {block} in stage {stage}")
    if A.block_kind(block) != "global":
        raise ContractError(f"block {block} of stage {stage} is a local block; pick an odd index")
    image = _image_batch(image)
    taps: dict = {}
    M.forward(m, image, taps)
    attn = taps[f"stage{stage}.blocks"][f"block{block}"]["attn"].data
    r = m.config.stage_resolutions()[stage]
    w = m.config.windows[stage]
    sal = saliency_from_attention(attn, A.WindowGrid(1, r, r, 1, w, w))
    R = m.config.resolution
    return Heatmap(normalize(upsample_bilinear(sal, R, R)), stage, block, "attention")


def grad_cam(m: M.Model, image: Tensor, class_index: int, stage: int = 2) -> Heatmap:
    K = m.config.num_classes
    if not 0 <= class_index < K:
        raise ContractError(f"class {class_index} out of range [0, {K})")
    if not 0 <= stage < 4:
        raise ContractError(f"stage {stage} out of range [0, 4)")
    image = _image_batch(image)
    taps: dict = {}
    saved = [(p, p.requires_grad) for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad = True
    try:
        with T.Tape():
            logits = M.forward(m, image, taps)
            score = logits[0, class_index]
        feats = taps[f"stage{stage}"]
        grad = T.backward(score, [feats])[feats].data[0]        # (C', H', W')
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    act = feats.data[0]
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum(0.0, np.tensordot(alpha, act, axes=(0, 0)))
    R = m.config.resolution
    return Heatmap(normalize(upsample_bilinear(cam, R, R)), stage, None, "gradcam")
