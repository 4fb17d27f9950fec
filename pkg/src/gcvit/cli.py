"""Command-line entry point: ``gcvit <subcommand> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 usage, configuration or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from typing import Sequence

import numpy as np

from gcvit import analysis as An
from gcvit import attention as A
from gcvit import data, imageio
from gcvit import model as M
from gcvit import tensor as T
from gcvit.blob import write_blob
from gcvit.errors import DimensionError, GCViTError, NonFiniteError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
LOG_EVERY = 25
GRADCHECK_FAMILIES = {
    "squeeze_excitation": "se",
    "fused_mbconv": "fused_mbconv",
    "stem": "stem",
    "downsample[gcvit]": "downsample[gcvit]",
    "downsample[conv_maxpool]": "downsample[conv_maxpool]",
    "downsample[patch_merging]": "downsample[patch_merging]",
    "mlp": "mlp",
    "rpb_lookup": "rpb_lookup",
    "local_attention": "local_attention",
    "global_query_generator": "generator",
    "global_attention": "global_attention",
    "gcvit_block": "gcvit_block",
}


# --------------------------------------------------------------------------- #
# Shared helpers
# --------------------------------------------------------------------------- #


def _config(args) -> M.VariantConfig:
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            return M.VariantConfig.from_dict(json.load(fh)).validate()
    return M.preset(args.variant).validate()


def _model(args) -> M.Model:
    if getattr(args, "checkpoint", None):
        return M.load(args.checkpoint)
    return M.build(_config(args), args.seed)


def _image(args, m: M.Model) -> T.Tensor:
    img = imageio.read_ppm(args.input)
    R = m.config.resolution
    if img.shape[1:] != (R, R):
        raise DimensionError(f"{args.input}: image is {img.shape[2]}x{img.shape[1]}, "
                             f"model {m.config.name!r} needs exactly {R}x{R}")
    return T.Tensor(img[None])


def _fmt_loc(loc) -> str:
    return f"(row={loc[0]}, col={loc[1]})"


def _write_heatmap(heat: An.Heatmap, args) -> None:
    imageio.write_pgm(args.out, heat.data)
    if args.blob:
        write_blob(args.blob, {"heatmap": heat.data})
    print(f"wrote {args.out} ({heat.shape[1]}x{heat.shape[0]})")
    print(f"max saliency at {_fmt_loc(heat.argmax())}")
    print(f"min saliency at {_fmt_loc(heat.argmin())}")


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_inspect(args) -> int:
    cfg = _config(args)
    report = An.cost_report(cfg, args.resolution)
    res = report.resolution
    print(f"config: {cfg.to_json()}")
    dims = cfg.stage_dims()
    stage_res = [res // 4 // 2 ** i for i in range(4)]
    for i in range(4):
        r = stage_res[i]
        print(f"stage {i}: shape ({r},{r}) channels {dims[i]} depth {cfg.depths[i]} "
              f"heads {cfg.heads[i]} window {cfg.windows[i]} "
              f"generator_repeats {A.generator_repeats(r, cfg.windows[i], i)} "
              f"eq3 {report.eq3[i]} attention_macs {report.attention_macs[i]}")
    millions = report.params / 1e6
    shown = f"{millions:.0f}" if millions >= 10 else f"{millions:.3f}"
    print(f"params: {shown}M ({report.params})")
    print(f"MACs: {report.macs / 1e9:.3f}G ({report.macs}) at {res}x{res}; "
          f"2xMACs: {2 * report.macs / 1e9:.3f}G")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    if args.table:
        print(report.to_table())
    return EXIT_OK


def cmd_forward(args) -> int:
    m = _model(args)
    logits = M.forward(m, _image(args, m)).data[0]
    k = min(args.topk or m.config.num_classes, m.config.num_classes)
    order = np.argsort(-logits, kind="stable")[:k]
    for idx in order:
        print(f"{int(idx)} {logits[idx]:.10f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    if args.mode in ("blocks", "all"):
        block_tol = min(args.block_tol, args.tol)
        for family, rep in An.audit_blocks(args.eps, block_tol, args.seed).items():
            flag = "PASS" if rep.passed else "FAIL"
            ok &= rep.passed
            print(f"{flag}  block {GRADCHECK_FAMILIES.get(family, family):<28} "
                  f"max_rel_err={rep.max_rel_err:.3e} tol={block_tol:g} checked={rep.checked} "
                  f"noise_limited={rep.noise_limited}")
            if not rep.passed and args.verbose:
                print(rep.to_table())
    if args.mode in ("model", "all"):
        cfg = _config(args)
        m = M.build(cfg, args.seed)
        rng = np.random.Generator(np.random.PCG64(args.seed + 1))
        R = cfg.resolution
        images = T.Tensor(rng.standard_normal((2, 3, R, R)))
        rep = An.audit_model(m, images, args.eps, args.tol, args.samples, args.seed)
        flag = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{flag}  model {cfg.name:<28} max_rel_err={rep.max_rel_err:.3e} tol={args.tol:g} "
              f"checked={rep.checked} noise_limited={rep.noise_limited}")
        if not rep.passed:
            for r in rep.failures()[:10]:
                print(f"      {r.group}: worst (index, analytic, numeric) = {r.worst}")
    print("gradcheck: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_CHECK


def overfit(steps: int = 500, lr: float = 0.05, seed: int = 42, n: int = 32,
            log=print) -> tuple[M.Model, float, list[float]]:
    """Train the toy preset on the synthetic stripe set; returns (model, accuracy, losses)."""
    cfg = M.preset("toy")
    images, labels = data.stripes(n, cfg.resolution, seed)
    batch = T.Tensor(images)
    m = M.build(cfg, seed)
    losses = []
    for step in range(steps):
        loss = M.train_step(m, batch, labels, lr)
        losses.append(loss)
        if step % LOG_EVERY == 0:
            log(f"step {step} loss {loss:.6f}")
    final = M.train_step(m, batch, labels, 0.0)
    acc = float(np.mean(M.predict(m, batch) == labels))
    log(f"step {steps} loss {final:.6f}")
    log(f"final train accuracy: {acc:.4f}")
    return m, acc, losses


def cmd_overfit(args) -> int:
    m, acc, _ = overfit(args.steps, args.lr, args.seed, args.n)
    if args.save:
        M.save(m, args.save)
        print(f"saved {args.save}")
    return EXIT_OK


def cmd_attnmap(args) -> int:
    m = _model(args)
    heat = An.attention_map(m, _image(args, m), args.stage, args.block)
    _write_heatmap(heat, args)
    return EXIT_OK


def cmd_gradcam(args) -> int:
    m = _model(args)
    heat = An.grad_cam(m, _image(args, m), args.class_index, args.stage)
    _write_heatmap(heat, args)
    return EXIT_OK


def cmd_bench(args) -> int:
    m = _model(args)
    R = m.config.resolution
    rng = np.random.Generator(np.random.PCG64(args.seed))
    images = T.Tensor(rng.standard_normal((args.batch, 3, R, R)))
    macs = An.mac_count(m.config, R, args.batch).macs
    times = []
    for i in range(args.repeat):
        t0 = time.perf_counter()
        M.forward(m, images)
        times.append(time.perf_counter() - t0)
        print(f"run {i}: {times[-1]:.4f} s")
    med = float(np.median(times))
    print(f"runs: {len(times)}")
    print(f"median: {med:.4f} s  min: {min(times):.4f} s")
    print(f"MACs: {macs} (batch {args.batch})")
    print(f"throughput: {macs / med / 1e9:.3f} GMAC/s")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def _add_model_source(p: argparse.ArgumentParser, checkpoint: bool = True,
                      default_variant: str = "toy") -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", default=default_variant, help="preset name")
    g.add_argument("--config", help="JSON file with a VariantConfig")
    if checkpoint:
        g.add_argument("--checkpoint", help="GCVT checkpoint (overrides --variant/--seed)")
    p.add_argument("--seed", type=int, default=0, help="weight-initialization seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print configuration, shapes and cost totals")
    _add_model_source(p, checkpoint=False, default_variant="t")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--json", help="also write the cost report as JSON here")
    p.add_argument("--table", action="store_true", help="print the per-layer table")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("forward", help="classify one PPM image")
    _add_model_source(p)
    p.add_argument("--input", required=True)
    p.add_argument("--topk", type=int, default=None)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_model_source(p, checkpoint=False)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4, help="model-level tolerance")
    p.add_argument("--block-tol", type=float, default=1e-6,
                   help="block-level tolerance (capped by --tol)")
    p.add_argument("--samples", type=int, default=1, help="coordinates per model tensor")
    p.add_argument("--mode", choices=("all", "blocks", "model"), default="all")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overfit", help="train the toy preset on synthetic stripes")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n", type=int, default=32, help="number of synthetic images")
    p.add_argument("--save", help="write the trained checkpoint here")
    p.set_defaults(func=cmd_overfit)

    for name, fn, helptext in (("attnmap", cmd_attnmap, "global attention heatmap"),
                               ("gradcam", cmd_gradcam, "Grad-CAM heatmap")):
        p = sub.add_parser(name, help=helptext)
        _add_model_source(p)
        p.add_argument("--input", required=True)
        p.add_argument("--out", required=True, help="output PGM path")
        p.add_argument("--blob", help="also write the float map as a GCVT blob")
        if name == "attnmap":
            p.add_argument("--stage", type=int, required=True)
            p.add_argument("--block", type=int, required=True)
        else:
            p.add_argument("--class", dest="class_index", type=int, required=True)
            p.add_argument("--stage", type=int, default=2)
        p.set_defaults(func=fn)

    p = sub.add_parser("bench", help="time forward passes")
    _add_model_source(p, default_variant="t")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeat", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit():
    raw = os.environ.get("GCVIT_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (GCViTError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
