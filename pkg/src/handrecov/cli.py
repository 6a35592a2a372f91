"""Command-line umbrella: `handrecov <subcommand>`.

Every subcommand accepts --config pointing at an INI pipeline config;
omitted, the paper-default configuration is used. HANDRECOV_SEED in the
environment overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import pngio
from .config import PipelineConfig, load_config, save_config, serialize_config
from .structure import generate_prior_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("handrecov").info


def _cfg(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _cmd_structure_gen(args):
    cfg = _cfg(args)
    out = Path(args.out) if args.out else cfg.domain_root("S")
    generate_prior_dataset(out, args.count, args.seed, args.kind,
                           cfg.glob.image_size)
    log(f"wrote {args.count} {args.kind} maps under {out}")


def _cmd_synth_gen(args):
    from .pipeline import prepare_synthetic_data
    cfg = _cfg(args)
    meta = prepare_synthetic_data(cfg, log=log)
    log(json.dumps(meta))


def _cmd_backbone_pretrain(args):
    from .data import ingest_dataset, load_image_stack
    from .pipeline import ensure_backbone
    cfg = _cfg(args)
    if cfg.backbone.pretrain_steps <= 0:
        log("backbone.pretrain_steps is 0; materializing the seeded backbone only")
    ds = ingest_dataset(cfg.domain_root("pairs"), "pairs")
    images = load_image_stack(ds)
    ensure_backbone(cfg, images)
    log(f"backbone ready under {cfg.glob.checkpoint_dir}/backbone.pt")


def _cmd_stage(args):
    from .pipeline import run_stage
    cfg = _cfg(args)
    report = run_stage(args.name, cfg, log=log)
    log(json.dumps({k: v for k, v in report.items()
                    if not isinstance(v, list)}, default=str))


def _cmd_saliency(args):
    cfg = _cfg(args)
    if args.action == "train":
        from .pipeline import run_stage
        run_stage("saliency", cfg, log=log)
        return
    from .pipeline import load_saliency_net
    from .saliency import estimate_saliency
    net = load_saliency_net(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in sorted(Path(args.inp).glob("*.png")):
        m = estimate_saliency(net, pngio.load_image(path))
        pngio.save_mask(out / path.name, m.values)
    log(f"saliency maps written to {out}")


def _cmd_tokenizer(args):
    cfg = _cfg(args)
    if args.action == "train":
        from .pipeline import run_stage
        run_stage("tokenizer", cfg, log=log)
        return
    from .checkpoint import load_checkpoint
    from .data import ingest_dataset, load_structure_stack
    from .pipeline import build_tokenizer
    from .tokenizer import codebook_usage, validation_mse
    model = build_tokenizer(cfg)
    load_checkpoint(Path(cfg.glob.checkpoint_dir) / "tokenizer.pt", model)
    ds = ingest_dataset(cfg.domain_root("S"), "S", cfg.glob.structure_kind)
    maps = torch.from_numpy(
        load_structure_stack(ds, cfg.glob.structure_kind, limit=args.limit)
    )
    log(f"round-trip MSE {validation_mse(model, maps):.5f}, "
        f"codebook usage {codebook_usage(model, maps):.3f}")


def _cmd_sketch(args):
    cfg = _cfg(args)
    if args.action == "train":
        from .pipeline import run_stage
        stage = {"supervised": "sketch_sup", "fixedpoint": "sketch_fp"}[args.stage]
        run_stage(stage, cfg, log=log)
        return
    from .pipeline import load_sketcher
    model = load_sketcher(cfg)
    out = Path(args.out)
    (out).mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(sorted(Path(args.inp).glob("*.png"))):
        smap = model.sketch(pngio.load_image(path), seed=args.seed + i)
        pngio.save_structure_png(out / path.name, smap.values, smap.kind)
    log(f"structure maps written to {out}")


def _cmd_degrade(args):
    from .degrade import degrade, sample_spec
    from .structure import item_rng
    from .synthetic import load_keypoints
    cfg = _cfg(args)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(sorted(Path(args.inp).glob("*.png"))):
        image = pngio.load_image(path)
        mask = pngio.load_mask(Path(args.masks) / path.name)
        kp_path = Path(args.kp) / f"{path.stem}.txt" if args.kp else None
        kp = load_keypoints(kp_path) if kp_path and kp_path.exists() else None
        spec = sample_spec(item_rng(args.seed, i), cfg.degrade, seed=args.seed + i)
        y = degrade(image, mask, spec, kp)
        pngio.save_image(out / "images" / path.name, y)
        (out / "specs").mkdir(exist_ok=True)
        (out / "specs" / f"{path.stem}.json").write_text(spec.to_json())
    log(f"degraded images written to {out}")


def _cmd_translate(args):
    cfg = _cfg(args)
    if args.action == "train":
        from .pipeline import run_stage
        run_stage("dad", cfg, log=log)
        return
    from .pipeline import recover
    recover(args.inp, cfg, args.out, seed=args.seed, log=log)


def _cmd_recover(args):
    from .pipeline import recover
    cfg = _cfg(args)
    recover(args.inp, cfg, args.out, seed=args.seed, log=log)


def _cmd_eval(args):
    from .metrics import (BuiltinExtractor, DependencyError, extract_features,
                          fid, get_extractor, kid)
    from .pipeline import load_backbone
    cfg = _cfg(args)

    def load_dir(d):
        files = sorted(Path(d).glob("*.png"))
        if not files:
            raise SystemExit(f"no PNG files under {d}")
        imgs = np.stack([pngio.load_image(p) for p in files])
        masks = None
        if args.masks:
            mdir = Path(args.masks)
            missing = [p.stem for p in files if not (mdir / p.name).exists()]
            if missing:
                raise SystemExit(f"masks missing for stems: {missing[:5]} ...")
            masks = np.stack([pngio.load_mask(mdir / p.name) for p in files])
        return imgs, masks

    real, real_m = load_dir(args.real)
    fake, fake_m = load_dir(args.fake)
    backbone = load_backbone(cfg)
    weights = (cfg.metrics.vit_weights_path if args.extractor == "vit"
               else cfg.metrics.cnn_weights_path)
    try:
        extractor = get_extractor(args.extractor, cfg.glob.image_size, backbone, weights)
    except DependencyError as e:
        log(f"{e}; falling back to the builtin extractor")
        extractor = BuiltinExtractor(backbone)
    fr = extract_features(real, real_m, extractor)
    ff = extract_features(fake, fake_m, extractor)
    f = fid(ff, fr)
    k_mean, k_std = kid(ff, fr, None, cfg.metrics.kid_num_subsets, seed=cfg.seed,
                        scale_100=cfg.metrics.kid_scale_100)
    table = (f"metric      value\n"
             f"FID         {f:.4f}\n"
             f"KID mean    {k_mean:.6f}\n"
             f"KID std     {k_std:.6f}\n")
    print(table)
    if args.report:
        Path(args.report).write_text(json.dumps({
            "extractor": getattr(extractor, "extractor_id", "custom"),
            "fid": f, "kid_mean": k_mean, "kid_std": k_std,
            "n_real": int(real.shape[0]), "n_fake": int(fake.shape[0]),
            "mask_filtered": bool(args.masks),
        }, indent=1))
        log(f"report written to {args.report}")


def _cmd_config(args):
    cfg = _cfg(args)
    if args.out:
        save_config(cfg, args.out)
        log(f"wrote canonical config to {args.out}")
    else:
        print(serialize_config(cfg), end="")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="handrecov")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("structure", help="structure-domain tools")
    ps = p.add_subparsers(dest="action", required=True)
    g = ps.add_parser("gen", help="render the bare-structure prior dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kind", default="normal", choices=["normal", "depth", "iuv"])
    g.add_argument("--out", default=None)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=_cmd_structure_gen)

    p = sub.add_parser("synth", help="bundled synthetic domains")
    ps = p.add_subparsers(dest="action", required=True)
    g = ps.add_parser("gen")
    g.add_argument("--config", default=None)
    g.set_defaults(fn=_cmd_synth_gen)

    p = sub.add_parser("backbone", help="frozen backbone management")
    ps = p.add_subparsers(dest="action", required=True)
    g = ps.add_parser("pretrain")
    g.add_argument("--config", default=None)
    g.set_defaults(fn=_cmd_backbone_pretrain)

    p = sub.add_parser("stage", help="run one pipeline stage")
    p.add_argument("name", choices=["saliency", "tokenizer", "sketch_sup",
                                    "sketch_fp", "dad", "eval"])
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_stage)

    p = sub.add_parser("saliency", help="saliency estimator")
    p.add_argument("action", choices=["train", "infer"])
    p.add_argument("--config", default=None)
    p.add_argument("--in", dest="inp", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_saliency)

    p = sub.add_parser("tokenizer", help="structure tokenizer")
    p.add_argument("action", choices=["train", "roundtrip"])
    p.add_argument("--config", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=_cmd_tokenizer)

    p = sub.add_parser("sketch", help="structure sketcher")
    p.add_argument("action", choices=["train", "infer"])
    p.add_argument("--stage", choices=["supervised", "fixedpoint"],
                   default="supervised")
    p.add_argument("--config", default=None)
    p.add_argument("--in", dest="inp", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_sketch)

    p = sub.add_parser("degrade", help="partner-domain degradation")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--kp", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_degrade)

    p = sub.add_parser("translate", help="appearance wrapping")
    p.add_argument("action", choices=["train", "infer"])
    p.add_argument("--config", default=None)
    p.add_argument("--in", dest="inp", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_translate)

    p = sub.add_parser("recover", help="full recovery: S(X), M[S(X)], Y")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_recover)

    p = sub.add_parser("eval", help="FID/KID over masked features")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--extractor", choices=["vit", "cnn", "builtin"],
                   default="builtin")
    p.add_argument("--report", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("config", help="print or write the canonical config")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_config)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
