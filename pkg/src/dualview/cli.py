"""Command-line interface.

Exit status: 0 on success, 1 on data errors (bad files, shapes, failed
checks), 2 on usage errors (argparse).
"""
import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .checks import gradcheck_suite, selftest
from .encoder import VisionEncoderSpec
from .exceptions import DualViewError, ShapeMismatch, WrongPerspective
from .geometry import (
    PERSPECTIVES,
    GridSpec,
    compute_grid,
    global_crop,
    global_recombine,
    local_crop,
    local_recombine,
)
from .pipeline import ABLATIONS, PipelineConfig, PipelineParams, budget, run

MANIFEST = "grid.txt"
PARAMS_FORMAT = 1

_CONFIG_KEYS = ("encoder_w", "encoder_h", "patch", "dim", "channels", "fusion_variant",
                "multires", "projector_out", "ablation", "share_branches", "seed")


def default_seed() -> int:
    return int(os.environ.get("DUALVIEW_SEED", "0"))


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise DualViewError(f"not a boolean: {s!r}")


def config_from_entries(entries) -> PipelineConfig:
    unknown = set(entries) - set(_CONFIG_KEYS)
    if unknown:
        raise DualViewError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        enc = VisionEncoderSpec(
            input_w=int(entries.get("encoder_w", 8)),
            input_h=int(entries.get("encoder_h", entries.get("encoder_w", 8))),
            patch=int(entries.get("patch", 4)),
            dim=int(entries.get("dim", 8)),
            channels=int(entries.get("channels", 3)),
        )
        return PipelineConfig(
            encoder=enc,
            fusion_variant=entries.get("fusion_variant", "linear_concat"),
            multires=_bool(entries.get("multires", "false")),
            seed=int(entries.get("seed", default_seed())),
            projector_out=int(entries.get("projector_out", enc.dim)),
            ablation=entries.get("ablation", "full"),
            share_branches=_bool(entries.get("share_branches", "false")),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, DualViewError):
            raise
        raise DualViewError(f"bad config: {e}") from None


def config_entries(cfg: PipelineConfig):
    e = cfg.encoder
    return {
        "encoder_w": e.input_w, "encoder_h": e.input_h, "patch": e.patch, "dim": e.dim,
        "channels": e.channels, "fusion_variant": cfg.fusion_variant,
        "multires": str(cfg.multires).lower(), "projector_out": cfg.projector_out,
        "ablation": cfg.ablation, "share_branches": str(cfg.share_branches).lower(),
        "seed": cfg.seed,
    }


def save_pipeline_params(path, cfg: PipelineConfig, params: PipelineParams):
    header = {"format": PARAMS_FORMAT}
    header.update(config_entries(cfg))
    dio.save_params(path, header, params.arrays())


def load_pipeline_params(path, cfg: PipelineConfig) -> PipelineParams:
    header, tensors = dio.load_params(path)
    for key in ("encoder_w", "encoder_h", "patch", "dim", "channels", "projector_out"):
        want = str(config_entries(cfg)[key])
        if key in header and header[key] != want:
            raise ShapeMismatch(f"params file has {key}={header[key]} but config says {want}")
    arrays = {k: v.astype(np.float64) for k, v in tensors.items()}
    return PipelineParams.from_arrays(arrays, cfg.fusion_variant)


# -- subcommands --------------------------------------------------------

def cmd_crop(args):
    ew, eh = args.encoder_res
    img = dio.load_image(args.inp, args.resize, (ew, eh))
    grid = compute_grid(img.shape[1], img.shape[0], ew, eh)
    subs = (local_crop if args.mode == "local" else global_crop)(img, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, item in enumerate(subs.items):
        dio.write_tensor(out / f"sub_{k:03d}.dpt", item)
    dio.write_manifest(out / MANIFEST, {
        "mode": args.mode, "img_w": grid.img_w, "img_h": grid.img_h,
        "enc_w": grid.enc_w, "enc_h": grid.enc_h, "n_w": grid.n_w, "n_h": grid.n_h,
        "channels": img.shape[2], "count": grid.n_sub,
    })
    print(f"wrote {grid.n_sub} {args.mode} sub-images ({grid.n_w}x{grid.n_h} grid) to {out}")
    return 0


def cmd_recombine(args):
    folder = Path(args.inp)
    m = dio.read_manifest(folder / MANIFEST)
    try:
        grid = GridSpec(*(int(m[k]) for k in ("img_w", "img_h", "enc_w", "enc_h", "n_w", "n_h")))
        count = int(m["count"])
    except (KeyError, ValueError) as e:
        raise dio.CorruptFile(f"bad grid manifest: {e}") from None
    if m.get("mode") != args.mode:
        raise WrongPerspective(f"directory holds {m.get('mode')} crops, asked for {args.mode}")
    items = [dio.read_tensor(folder / f"sub_{k:03d}.dpt") for k in range(count)]
    fn = local_recombine if args.mode == "local" else global_recombine
    dio.write_tensor(args.out, fn(items, grid))
    print(f"wrote {grid.img_w}x{grid.img_h} tensor to {args.out}")
    return 0


def _load_config(args):
    entries = dio.read_manifest(args.config) if args.config else {}
    cfg = config_from_entries(entries)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    elif "seed" not in entries:
        changes["seed"] = default_seed()
    if getattr(args, "ablation", None):
        changes["ablation"] = args.ablation
    return cfg.replace(**changes)


def cmd_init_params(args):
    cfg = _load_config(args)
    save_pipeline_params(args.out, cfg, PipelineParams.init(cfg))
    print(f"wrote parameters (seed={cfg.seed}) to {args.out}")
    return 0


def cmd_pipeline(args):
    cfg = _load_config(args)
    if args.params:
        params = load_pipeline_params(args.params, cfg)
    else:
        params = PipelineParams.init(cfg)
    e = cfg.encoder
    img = dio.load_image(args.inp, args.resize, (e.input_w, e.input_h))
    seq = run(img, cfg, params)
    dio.write_tensor(args.out, seq.tokens)
    print(f"wrote {len(seq)} tokens x {seq.tokens.shape[1]} to {args.out}")
    return 0


def cmd_tokens(args):
    rw, rh = args.res
    ew, eh = args.encoder_res
    cfg = PipelineConfig(encoder=VisionEncoderSpec(ew, eh, args.patch, args.dim),
                         multires=args.multires)
    for line in budget(rw, rh, cfg).lines():
        print(line)
    return 0


def cmd_gradcheck(args):
    if args.toy:
        dim, grid, tokens = 8, (2, 2), (2, 2)
    else:
        dim, grid, tokens = args.dim, tuple(args.grid), tuple(args.tokens)
    results = gradcheck_suite(args.seed, dim, grid, tokens, args.h)
    worst = 0.0
    for variant, r in results.items():
        print(f"{variant}: max_rel_error={r.max_rel_error:.3e} coords={r.n_coords}")
        worst = max(worst, r.max_rel_error)
    ok = worst < args.tol
    print(f"max_rel_error={worst:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_selftest(args):
    results = selftest(args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="dualview", description="Dual-perspective cropping and enhancement toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("crop", help="crop a PPM image into DPT1 sub-images")
    c.add_argument("--mode", choices=PERSPECTIVES, required=True)
    c.add_argument("--encoder-res", type=int, nargs=2, metavar=("W", "H"), required=True)
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--resize", choices=dio.RESIZE_POLICIES, default="reject")
    c.set_defaults(func=cmd_crop)

    r = sub.add_parser("recombine", help="invert crop")
    r.add_argument("--mode", choices=PERSPECTIVES, required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recombine)

    def add_config(sp):
        sp.add_argument("--config", help="key=value pipeline config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="overrides the config seed (default: $DUALVIEW_SEED or 0)")

    ip = sub.add_parser("init-params", help="write seeded pipeline parameters")
    add_config(ip)
    ip.add_argument("--out", required=True)
    ip.set_defaults(func=cmd_init_params)

    pl = sub.add_parser("pipeline", help="image -> visual tokens")
    add_config(pl)
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--params", help="DPP1 parameter file (default: draw from the seed)")
    pl.add_argument("--out", required=True)
    pl.add_argument("--ablation", choices=ABLATIONS)
    pl.add_argument("--resize", choices=dio.RESIZE_POLICIES, default="reject")
    pl.set_defaults(func=cmd_pipeline)

    t = sub.add_parser("tokens", help="print the token and FLOP budget")
    t.add_argument("--res", type=int, nargs=2, metavar=("W", "H"), required=True)
    t.add_argument("--encoder-res", type=int, nargs=2, metavar=("W", "H"), required=True)
    t.add_argument("--patch", type=int, required=True)
    t.add_argument("--dim", type=int, default=1024, help="feature dim (default 1024, ViT-L)")
    t.add_argument("--multires", action="store_true")
    t.set_defaults(func=cmd_tokens)

    g = sub.add_parser("gradcheck", help="finite-difference check of the enhancement gradients")
    g.add_argument("--seed", type=int, default=default_seed())
    g.add_argument("--toy", action="store_true", help="d=8, 2x2 grid, 2x2 tokens per sub-grid")
    g.add_argument("--dim", type=int, default=4)
    g.add_argument("--grid", type=int, nargs=2, default=(2, 2), metavar=("NW", "NH"))
    g.add_argument("--tokens", type=int, nargs=2, default=(2, 2), metavar=("W", "H"))
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="round-trip, permutation, normalization and oracle suites")
    s.add_argument("--seed", type=int, default=default_seed())
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DualViewError, OSError) as e:
        print(f"dualview: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
