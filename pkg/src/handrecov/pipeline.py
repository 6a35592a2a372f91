"""Stage orchestration: sequencing, checkpointing, seeding, reports.

Six stages run in dependency order: saliency -> tokenizer -> sketch_sup ->
sketch_fp -> dad -> eval. Every stage takes the stage lock, seeds torch,
trains (resuming from its progress file when present), writes a single-file
checkpoint plus a JSON report, and copies the resolved config next to its
outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import pngio
from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint,
                         stage_lock)
from .config import PipelineConfig, save_config, serialize_config
from .data import (DataError, ingest_dataset, load_image_stack,
                   load_mask_stack, load_structure_stack)
from .degrade import degrade, sample_spec
from .metrics import (BuiltinExtractor, DependencyError, extract_features,
                      fid, get_extractor, kid)
from .saliency import (PatchSaliencyMLP, SaliencyNet, estimate_saliency,
                       train_distill, train_estimator)
from .sketcher import SketcherModel, mean_fixedpoint_residual, train_fixedpoint, train_supervised
from .structure import StructureMap, generate_prior_dataset, item_rng, to_image_range
from .synthetic import generate_domains
from .tokenizer import (StructureTokenizer, codebook_usage, train_tokenizer,
                        validation_mse)
from .translator import (DiscriminatorPair, WrapperStack, masked_background_mse,
                         train_dad_steps)
from .vit import ViTBackbone, parameter_checksum, seeded_backbone, self_distill

logger = logging.getLogger(__name__)

STAGES = ("saliency", "tokenizer", "sketch_sup", "sketch_fp", "dad", "eval")

# Checkpoints each stage must find before it can run.
STAGE_DEPS = {
    "saliency": (),
    "tokenizer": (),
    "sketch_sup": (("saliency", "saliency_mlp.pt"), ("tokenizer", "tokenizer.pt")),
    "sketch_fp": (("sketch_sup", "sketcher_sup.pt"),),
    "dad": (("sketch_sup", "sketcher_sup.pt"), ("saliency", "saliency_net.pt")),
    "eval": (("dad", "translator.pt"),),
}


class StageDependencyError(RuntimeError):
    pass


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]


def _ckpt_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.glob.checkpoint_dir)


def check_dependencies(name: str, cfg: PipelineConfig) -> None:
    for stage, fname in STAGE_DEPS[name]:
        if not (_ckpt_dir(cfg) / fname).exists():
            raise StageDependencyError(
                f"stage {name!r} requires checkpoint {fname} from stage {stage!r}; "
                f"run `handrecov stage {stage}` first"
            )


# ---------------------------------------------------------------------------
# Model construction / loading
# ---------------------------------------------------------------------------

def build_backbone(cfg: PipelineConfig) -> ViTBackbone:
    bb = cfg.backbone
    net = seeded_backbone(cfg.glob.image_size, cfg.glob.patch_size,
                          bb.width, bb.depth, bb.heads, cfg.seed)
    if bb.weights_path:
        state = torch.load(bb.weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        net.freeze()
    return net


def ensure_backbone(cfg: PipelineConfig, images: np.ndarray | None = None) -> ViTBackbone:
    """Load the shared frozen backbone, materializing it on first use.

    With pretrain_steps > 0 and an image pool the backbone is self-distilled
    before freezing; otherwise the seeded random initialization is kept.
    """
    path = _ckpt_dir(cfg) / "backbone.pt"
    net = build_backbone(cfg)
    if path.exists():
        load_checkpoint(path, net)
        return net.freeze()
    if cfg.backbone.pretrain_steps > 0 and images is not None:
        logger.info("self-distilling backbone for %d steps", cfg.backbone.pretrain_steps)
        self_distill(net, torch.from_numpy(images.astype(np.float32)),
                     steps=cfg.backbone.pretrain_steps,
                     batch_size=cfg.backbone.pretrain_batch,
                     lr=cfg.backbone.pretrain_lr, seed=cfg.seed)
    save_checkpoint(path, net, meta={"kind": "backbone", "config": config_hash(cfg)})
    return net.freeze()


def load_backbone(cfg: PipelineConfig) -> ViTBackbone:
    path = _ckpt_dir(cfg) / "backbone.pt"
    net = build_backbone(cfg)
    if path.exists():
        load_checkpoint(path, net)
    return net.freeze()


def build_tokenizer(cfg: PipelineConfig) -> StructureTokenizer:
    t = cfg.tokenizer
    return StructureTokenizer(cfg.glob.image_size, cfg.glob.structure_kind,
                              t.codebook_size, t.embed_dim, t.enc_channels)


def build_sketcher(cfg: PipelineConfig) -> SketcherModel:
    backbone = load_backbone(cfg)
    tok = build_tokenizer(cfg)
    mlp = PatchSaliencyMLP(backbone.width, cfg.saliency.mlp_hidden)
    s = cfg.sketcher
    return SketcherModel(backbone, tok, mlp, s.mask_ratio, s.mask_epsilon,
                         s.decoder_width, s.decoder_depth, s.decoder_heads)


def load_sketcher(cfg: PipelineConfig, prefer_finetuned: bool = True) -> SketcherModel:
    model = build_sketcher(cfg)
    ck = _ckpt_dir(cfg)
    path = ck / "sketcher_fp.pt"
    if not (prefer_finetuned and path.exists()):
        path = ck / "sketcher_sup.pt"
    if not path.exists():
        raise CheckpointError("no sketcher checkpoint; run sketch_sup first")
    load_checkpoint(path, model)
    model.eval()
    return model


def load_saliency_net(cfg: PipelineConfig) -> SaliencyNet:
    net = SaliencyNet(cfg.glob.image_size, cfg.saliency.base_channels)
    load_checkpoint(_ckpt_dir(cfg) / "saliency_net.pt", net)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Shared data helpers
# ---------------------------------------------------------------------------

def _load_pairs(cfg: PipelineConfig, limit: int | None = None):
    ds = ingest_dataset(cfg.domain_root("pairs"), "pairs")
    images = load_image_stack(ds, limit)
    masks = load_mask_stack(ds, limit)
    structures = load_structure_stack(ds, cfg.glob.structure_kind, limit)
    return images, masks, structures


def _split(n: int, val_fraction: float) -> tuple[slice, slice]:
    n_val = max(1, int(n * val_fraction))
    return slice(0, n - n_val), slice(n - n_val, n)


def structure_to_image_batch(structures: np.ndarray) -> np.ndarray:
    """(b,3,h,w) normal maps in [-1,1] -> image-range [0,1]."""
    return ((structures + 1.0) / 2.0).astype(np.float32)


def sketch_with_mask(sketcher: SketcherModel, saliency_net: SaliencyNet,
                     image: np.ndarray, seed: int):
    """One inference pass: S(X) and M[S(X)] for a (3,h,w) image in [0,1]."""
    smap = sketcher.sketch(image, seed=seed)
    msx = estimate_saliency(saliency_net, smap)
    return smap, msx


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _report_path(cfg: PipelineConfig, name: str) -> Path:
    return _ckpt_dir(cfg) / "reports" / f"{name}.json"


def _write_report(cfg: PipelineConfig, name: str, payload: dict) -> dict:
    payload = {"stage": name, "config": config_hash(cfg), **payload}
    path = _report_path(cfg, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    return payload


def _seed_all(cfg: PipelineConfig, offset: int) -> None:
    torch.manual_seed(cfg.seed + offset)
    np.random.seed((cfg.seed + offset) % 2 ** 31)


def _progress_path(cfg: PipelineConfig, name: str) -> Path:
    return _ckpt_dir(cfg) / f"{name}_progress.pt"


def stage_saliency(cfg: PipelineConfig, log=logger.info) -> dict:
    _seed_all(cfg, 1)
    t0 = time.time()
    images, masks, structures = _load_pairs(cfg)
    s_ds = ingest_dataset(cfg.domain_root("S"), "S", cfg.glob.structure_kind)
    s_stack = load_structure_stack(s_ds, cfg.glob.structure_kind,
                                   limit=min(len(s_ds), images.shape[0]))
    s_imgs = structure_to_image_batch(s_stack)
    s_masks = (np.linalg.norm(s_stack, axis=1) > 0.5).astype(np.float32)

    backbone = ensure_backbone(cfg, images)
    checksum_before = parameter_checksum(backbone)

    mixed_images = np.concatenate([images, s_imgs], axis=0).astype(np.float32)
    mixed_masks = np.concatenate([masks, s_masks], axis=0).astype(np.float32)
    net = SaliencyNet(cfg.glob.image_size, cfg.saliency.base_channels)
    est_losses = train_estimator(net, mixed_images, mixed_masks,
                                 steps=cfg.saliency.train_steps,
                                 batch_size=cfg.saliency.batch_size,
                                 lr=cfg.saliency.lr, seed=cfg.seed, log=log)
    save_checkpoint(_ckpt_dir(cfg) / "saliency_net.pt", net,
                    meta={"kind": "saliency_net", "config": config_hash(cfg)})

    mlp = PatchSaliencyMLP(backbone.width, cfg.saliency.mlp_hidden)
    distill_losses = train_distill(mlp, backbone, net, mixed_images,
                                   cfg.glob.patch_size,
                                   steps=cfg.saliency.distill_steps,
                                   batch_size=cfg.saliency.batch_size,
                                   lr=cfg.saliency.lr, seed=cfg.seed, log=log)
    save_checkpoint(_ckpt_dir(cfg) / "saliency_mlp.pt", mlp,
                    meta={"kind": "saliency_mlp", "config": config_hash(cfg)})

    if parameter_checksum(backbone) != checksum_before:
        raise RuntimeError("frozen backbone changed during saliency distillation")

    # Validation IoU on a held-back tail of each pool.
    def iou(pred, truth):
        p = pred >= 0.5
        t = truth >= 0.5
        inter = (p & t).sum()
        union = (p | t).sum()
        return float(inter) / max(1, union)

    net.eval()
    n_val = max(1, images.shape[0] // 10)
    with torch.no_grad():
        img_pred = net(torch.from_numpy(images[-n_val:])).numpy()
        s_pred = net(torch.from_numpy(s_imgs[-n_val:])).numpy()
    img_iou = float(np.mean([iou(img_pred[i], masks[-n_val:][i]) for i in range(n_val)]))
    s_iou = float(np.mean([iou(s_pred[i], s_masks[-n_val:][i]) for i in range(n_val)]))

    return _write_report(cfg, "saliency", {
        "elapsed": time.time() - t0,
        "estimator_losses": est_losses[-50:],
        "distill_losses": distill_losses[-50:],
        "estimator_final_loss": est_losses[-1],
        "distill_final_loss": distill_losses[-1],
        "image_iou": img_iou,
        "structure_iou": s_iou,
        "backbone_checksum": checksum_before,
    })


def stage_tokenizer(cfg: PipelineConfig, log=logger.info, resume: bool = True) -> dict:
    from .translator import MultiScalePatchDiscriminator

    _seed_all(cfg, 2)
    t0 = time.time()
    s_ds = ingest_dataset(cfg.domain_root("S"), "S", cfg.glob.structure_kind)
    stack = load_structure_stack(s_ds, cfg.glob.structure_kind)
    maps = torch.from_numpy(stack.astype(np.float32))
    tr, va = _split(maps.shape[0], cfg.tokenizer.val_fraction)

    model = build_tokenizer(cfg)
    from .structure import KIND_CHANNELS
    disc = MultiScalePatchDiscriminator(KIND_CHANNELS[cfg.glob.structure_kind],
                                        base_channels=16, scales=2)
    start_step, opt_state = 0, None
    progress = _progress_path(cfg, "tokenizer")
    if resume and progress.exists():
        payload = load_checkpoint(progress, verify=False)
        model.load_state_dict(payload["extra"]["model"])
        disc.load_state_dict(payload["extra"]["disc"])
        start_step = payload["extra"]["step"]
        opt_state = payload["extra"]["opt"]
        log(f"resuming tokenizer from step {start_step}")

    t = cfg.tokenizer
    history, opt_states = train_tokenizer(
        model, disc, maps[tr],
        steps=t.train_steps, batch_size=t.batch_size, lr=t.lr,
        kl_weight_max=t.kl_weight_max, kl_ramp_steps=t.kl_ramp_steps,
        adv_weight=t.adv_weight, tau_start=t.tau_start, tau_end=t.tau_end,
        tau_ramp_steps=t.tau_ramp_steps, seed=cfg.seed,
        val_maps=maps[va], val_every=max(1, t.train_steps // 10),
        log=log, start_step=start_step, opt_state=opt_state,
    )
    save_checkpoint(_ckpt_dir(cfg) / "tokenizer.pt", model,
                    meta={"kind": "tokenizer", "config": config_hash(cfg)})
    save_checkpoint(progress, model, extra={
        "model": model.state_dict(), "disc": disc.state_dict(),
        "step": t.train_steps, "opt": opt_states,
    })
    val_mse = validation_mse(model, maps[va])
    usage = codebook_usage(model, maps[va])
    return _write_report(cfg, "tokenizer", {
        "elapsed": time.time() - t0,
        "steps": t.train_steps,
        "history_tail": history[-50:],
        "val_mse": val_mse,
        "codebook_usage": usage,
        "loss_curve": [h.get("val_mse") for h in history if "val_mse" in h],
    })


def stage_sketch_sup(cfg: PipelineConfig, log=logger.info, resume: bool = True) -> dict:
    check_dependencies("sketch_sup", cfg)
    _seed_all(cfg, 3)
    t0 = time.time()
    images, _, structures = _load_pairs(cfg)
    model = build_sketcher(cfg)
    load_checkpoint(_ckpt_dir(cfg) / "tokenizer.pt", model.tokenizer)
    load_checkpoint(_ckpt_dir(cfg) / "saliency_mlp.pt", model.saliency_mlp)
    for p in model.tokenizer.parameters():
        p.requires_grad_(False)
    for p in model.saliency_mlp.parameters():
        p.requires_grad_(False)
    backbone_sum = parameter_checksum(model.backbone)

    x = torch.from_numpy(images.astype(np.float32))
    s = torch.from_numpy(structures.astype(np.float32))
    start_step, opt_state = 0, None
    progress = _progress_path(cfg, "sketch_sup")
    if resume and progress.exists():
        payload = load_checkpoint(progress, verify=False)
        model.load_state_dict(payload["extra"]["model"])
        start_step = payload["extra"]["step"]
        opt_state = payload["extra"]["opt"]
        log(f"resuming sketch_sup from step {start_step}")

    sk = cfg.sketcher
    history, opt_final = train_supervised(
        model, x, s, steps=sk.supervised_steps, batch_size=sk.batch_size,
        lr=sk.lr, seed=cfg.seed, log=log,
        start_step=start_step, opt_state=opt_state,
    )
    if parameter_checksum(model.backbone) != backbone_sum:
        raise RuntimeError("frozen backbone changed during supervised training")
    save_checkpoint(_ckpt_dir(cfg) / "sketcher_sup.pt", model,
                    meta={"kind": "sketcher", "stage": "supervised",
                          "config": config_hash(cfg)})
    save_checkpoint(progress, model, extra={
        "model": model.state_dict(), "step": sk.supervised_steps, "opt": opt_final,
    })
    return _write_report(cfg, "sketch_sup", {
        "elapsed": time.time() - t0,
        "steps": sk.supervised_steps,
        "history_tail": history[-50:],
        "final_loss": history[-1]["loss"] if history else None,
        "backbone_checksum": backbone_sum,
    })


def stage_sketch_fp(cfg: PipelineConfig, log=logger.info, resume: bool = True) -> dict:
    check_dependencies("sketch_fp", cfg)
    _seed_all(cfg, 4)
    t0 = time.time()
    images, _, structures = _load_pairs(cfg)
    unl = ingest_dataset(cfg.domain_root("unlabeled"), "unlabeled")
    unlabeled = load_image_stack(unl)
    tr, va = _split(unlabeled.shape[0], 0.15)

    model = build_sketcher(cfg)
    load_checkpoint(_ckpt_dir(cfg) / "sketcher_sup.pt", model)
    for p in model.saliency_mlp.parameters():
        p.requires_grad_(False)
    for p in model.tokenizer.encoder.parameters():
        p.requires_grad_(False)
    backbone_sum = parameter_checksum(model.backbone)

    residual_before = mean_fixedpoint_residual(model, unlabeled[va], seed=cfg.seed)

    start_step, opt_state = 0, None
    progress = _progress_path(cfg, "sketch_fp")
    if resume and progress.exists():
        payload = load_checkpoint(progress, verify=False)
        model.load_state_dict(payload["extra"]["model"])
        start_step = payload["extra"]["step"]
        opt_state = payload["extra"]["opt"]
        log(f"resuming sketch_fp from step {start_step}")

    sk = cfg.sketcher
    history, opt_final = train_fixedpoint(
        model,
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(structures.astype(np.float32)),
        torch.from_numpy(unlabeled[tr].astype(np.float32)),
        steps=sk.finetune_steps, batch_size=sk.batch_size, lr=sk.lr,
        labeled_ratio=sk.labeled_unlabeled_ratio, tau=cfg.tokenizer.tau_end,
        second_pass_gradient=sk.second_pass_gradient, seed=cfg.seed, log=log,
        start_step=start_step, opt_state=opt_state,
    )
    if parameter_checksum(model.backbone) != backbone_sum:
        raise RuntimeError("frozen backbone changed during fixed-point training")
    residual_after = mean_fixedpoint_residual(model, unlabeled[va], seed=cfg.seed)
    save_checkpoint(_ckpt_dir(cfg) / "sketcher_fp.pt", model,
                    meta={"kind": "sketcher", "stage": "fixedpoint",
                          "config": config_hash(cfg)})
    save_checkpoint(progress, model, extra={
        "model": model.state_dict(), "step": sk.finetune_steps, "opt": opt_final,
    })
    return _write_report(cfg, "sketch_fp", {
        "elapsed": time.time() - t0,
        "steps": sk.finetune_steps,
        "history_tail": history[-50:],
        "residual_before": residual_before,
        "residual_after": residual_after,
        "residual_reduction": 1.0 - residual_after / max(residual_before, 1e-12),
    })


def _precompute_sketches(cfg, sketcher, saliency_net, images, seed_offset):
    """S(X) in image range and M[S(X)] for an image stack."""
    s_imgs = np.zeros_like(images)
    masks = np.zeros(images.shape[:1] + images.shape[2:], dtype=np.float32)
    for i in range(images.shape[0]):
        smap, msx = sketch_with_mask(sketcher, saliency_net, images[i],
                                     seed=cfg.seed + seed_offset + i)
        s_imgs[i] = to_image_range(smap)
        masks[i] = msx.values
    return s_imgs, masks


def stage_dad(cfg: PipelineConfig, log=logger.info, resume: bool = True) -> dict:
    check_dependencies("dad", cfg)
    _seed_all(cfg, 5)
    t0 = time.time()
    sketcher = load_sketcher(cfg)
    saliency_net = load_saliency_net(cfg)

    a_ds = ingest_dataset(cfg.domain_root("A1"), "A1")
    b_ds = ingest_dataset(cfg.domain_root("B"), "B")
    a_images = load_image_stack(a_ds)
    b_images = load_image_stack(b_ds)
    b_kps = [b_ds.load_keypoints(i) for i in range(len(b_ds))]

    log(f"precomputing sketches for {a_images.shape[0]} A and "
        f"{b_images.shape[0]} B images")
    a_s, a_m = _precompute_sketches(cfg, sketcher, saliency_net, a_images, 1000)
    b_s, b_m = _precompute_sketches(cfg, sketcher, saliency_net, b_images, 2000)

    # Partner domain: degrade B in-mask, then sketch the degraded images.
    variants = max(1, cfg.translator.partner_variants)
    bt_images = np.zeros((b_images.shape[0] * variants,) + b_images.shape[1:],
                         dtype=np.float32)
    bt_clean_idx = np.zeros(bt_images.shape[0], dtype=np.int64)
    for v in range(variants):
        for i in range(b_images.shape[0]):
            j = v * b_images.shape[0] + i
            spec = sample_spec(item_rng(cfg.seed + 91, j), cfg.degrade,
                               seed=cfg.seed + 5000 + j)
            bt_images[j] = degrade(b_images[i], b_m[i], spec, b_kps[i])
            bt_clean_idx[j] = i
    bt_s, bt_m = _precompute_sketches(cfg, sketcher, saliency_net, bt_images, 3000)

    generator = WrapperStack(cfg.translator.base_channels, cfg.translator.style_dim,
                             cfg.translator.num_wrappers,
                             cfg.translator.rgb_skip_accumulate)
    pair = DiscriminatorPair(cfg.translator.disc_channels, cfg.translator.disc_scales)
    start_step, opt_state = 0, None
    progress = _progress_path(cfg, "dad")
    if resume and progress.exists():
        payload = load_checkpoint(progress, verify=False)
        generator.load_state_dict(payload["extra"]["generator"])
        pair.load_state_dict(payload["extra"]["pair"])
        start_step = payload["extra"]["step"]
        opt_state = payload["extra"]["opt"]
        log(f"resuming dad from step {start_step}")

    batch = cfg.translator.batch_size
    n_a = (batch + 1) // 2
    n_bt = max(1, batch // 2)
    xa = torch.from_numpy(a_images)
    sa = torch.from_numpy(a_s)
    ma = torch.from_numpy(a_m)
    xbt = torch.from_numpy(bt_images)
    sbt = torch.from_numpy(bt_s)
    mbt = torch.from_numpy(bt_m)
    xb = torch.from_numpy(b_images)

    def sample_batch(step, gen):
        ia = torch.randint(0, xa.shape[0], (n_a,), generator=gen)
        ib = torch.randint(0, xbt.shape[0], (n_bt,), generator=gen)
        clean = torch.from_numpy(bt_clean_idx)[ib]
        return {
            "x_a": xa[ia], "s_a": sa[ia], "m_a": ma[ia],
            "x_bt": xbt[ib], "s_bt": sbt[ib], "m_bt": mbt[ib],
            "x_b": xb[clean],
        }

    tr_cfg = cfg.translator
    history, opt_states = train_dad_steps(
        generator, pair, sample_batch, steps=tr_cfg.train_steps, lr=tr_cfg.lr,
        alpha_low=tr_cfg.alpha_low, alpha_high=tr_cfg.alpha_high,
        seed=cfg.seed, log=log, start_step=start_step, opt_state=opt_state,
    )
    save_checkpoint(_ckpt_dir(cfg) / "translator.pt", generator,
                    meta={"kind": "translator", "config": config_hash(cfg)})
    save_checkpoint(_ckpt_dir(cfg) / "dad_disc.pt", pair,
                    meta={"kind": "dad_discriminators", "config": config_hash(cfg)})
    save_checkpoint(progress, generator, extra={
        "generator": generator.state_dict(), "pair": pair.state_dict(),
        "step": tr_cfg.train_steps, "opt": opt_states,
    })
    return _write_report(cfg, "dad", {
        "elapsed": time.time() - t0,
        "steps": tr_cfg.train_steps,
        "history_tail": history[-50:],
        "partner_items": int(bt_images.shape[0]),
    })


def stage_eval(cfg: PipelineConfig, log=logger.info, limit: int = 64) -> dict:
    check_dependencies("eval", cfg)
    _seed_all(cfg, 6)
    t0 = time.time()
    sketcher = load_sketcher(cfg)
    saliency_net = load_saliency_net(cfg)
    generator = WrapperStack(cfg.translator.base_channels, cfg.translator.style_dim,
                             cfg.translator.num_wrappers,
                             cfg.translator.rgb_skip_accumulate)
    load_checkpoint(_ckpt_dir(cfg) / "translator.pt", generator)
    generator.eval()

    a_ds = ingest_dataset(cfg.domain_root("A1"), "A1")
    b_ds = ingest_dataset(cfg.domain_root("B"), "B")
    a_images = load_image_stack(a_ds, limit)
    b_images = load_image_stack(b_ds, limit)

    a_s, a_m = _precompute_sketches(cfg, sketcher, saliency_net, a_images, 7000)
    b_s, b_m = _precompute_sketches(cfg, sketcher, saliency_net, b_images, 8000)
    with torch.no_grad():
        y_a, _ = generator(torch.from_numpy(a_images), torch.from_numpy(a_s))
    y_a = y_a.numpy()

    backbone = load_backbone(cfg)
    try:
        extractor = get_extractor(cfg.metrics.extractor, cfg.glob.image_size,
                                  backbone,
                                  cfg.metrics.vit_weights_path
                                  if cfg.metrics.extractor == "vit"
                                  else cfg.metrics.cnn_weights_path)
    except DependencyError as e:
        log(f"{e}; falling back to the builtin extractor")
        extractor = BuiltinExtractor(backbone)

    feats_b = extract_features(b_images, b_m, extractor)
    feats_raw = extract_features(a_images, a_m, extractor)
    feats_tr = extract_features(y_a, a_m, extractor)
    fid_raw = fid(feats_raw, feats_b)
    fid_tr = fid(feats_tr, feats_b)
    kid_tr = kid(feats_tr, feats_b, cfg.metrics.kid_subset_size
                 if cfg.metrics.kid_subset_size <= min(limit, len(a_ds), len(b_ds))
                 else None,
                 cfg.metrics.kid_num_subsets, seed=cfg.seed,
                 scale_100=cfg.metrics.kid_scale_100)

    report = _write_report(cfg, "eval", {
        "elapsed": time.time() - t0,
        "extractor": getattr(extractor, "extractor_id", "custom"),
        "fid_raw_vs_b": fid_raw,
        "fid_translated_vs_b": fid_tr,
        "kid_translated_vs_b": {"mean": kid_tr[0], "std": kid_tr[1]},
        "n_images": int(a_images.shape[0]),
    })
    log(f"FID raw->B {fid_raw:.3f} vs translated->B {fid_tr:.3f}")
    return report


_STAGE_FNS = {
    "saliency": stage_saliency,
    "tokenizer": stage_tokenizer,
    "sketch_sup": stage_sketch_sup,
    "sketch_fp": stage_sketch_fp,
    "dad": stage_dad,
    "eval": stage_eval,
}


def run_stage(name: str, cfg: PipelineConfig, log=logger.info, **kwargs) -> dict:
    """Run one pipeline stage under the directory lock; returns its report."""
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}; valid: {STAGES}")
    check_dependencies(name, cfg)
    ckdir = _ckpt_dir(cfg)
    with stage_lock(ckdir, name):
        save_config(cfg, ckdir / "config.ini")
        return _STAGE_FNS[name](cfg, log=log, **kwargs)


# ---------------------------------------------------------------------------
# Data preparation helpers (bundled synthetic corpus)
# ---------------------------------------------------------------------------

def prepare_synthetic_data(cfg: PipelineConfig, log=logger.info) -> dict:
    """Generate the structure prior set and all synthetic image domains."""
    root = cfg.domain_root("S")
    if not (root / "manifest.json").exists():
        log(f"rendering {cfg.data.synth_structures} prior structure maps")
        generate_prior_dataset(root, cfg.data.synth_structures, cfg.seed,
                               cfg.glob.structure_kind, cfg.glob.image_size)
    meta = Path(cfg.glob.data_root) / "synth_meta.json"
    if not meta.exists():
        log(f"rendering synthetic domains ({cfg.data.synth_scenes} scenes each)")
        generate_domains(cfg)
    return json.loads(meta.read_text())


# ---------------------------------------------------------------------------
# Recovery (the end-user entry point)
# ---------------------------------------------------------------------------

def recover(
    input_dir: str | Path,
    cfg: PipelineConfig,
    out_dir: str | Path,
    seed: int | None = None,
    log=logger.info,
) -> dict:
    """Per input image write S(X), M[S(X)] and the recovered Y, plus a
    manifest with seeds and checkpoint hashes. Per-image failures are
    isolated: they are logged in the manifest and the run continues."""
    seed = cfg.seed if seed is None else seed
    sketcher = load_sketcher(cfg)
    saliency_net = load_saliency_net(cfg)
    generator = WrapperStack(cfg.translator.base_channels, cfg.translator.style_dim,
                             cfg.translator.num_wrappers,
                             cfg.translator.rgb_skip_accumulate)
    tr_payload = load_checkpoint(_ckpt_dir(cfg) / "translator.pt", generator)
    generator.eval()

    in_dir = Path(input_dir)
    out = Path(out_dir)
    (out / "structures").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "recovered").mkdir(parents=True, exist_ok=True)

    files = sorted(in_dir.glob("*.png"))
    if not files:
        raise DataError(f"no PNG inputs under {in_dir}")
    items, failures = [], []
    for i, path in enumerate(files):
        item_seed = seed + i
        try:
            image = pngio.load_image(path)
            smap, msx = sketch_with_mask(sketcher, saliency_net, image, item_seed)
            s_img = to_image_range(smap)
            with torch.no_grad():
                y, _ = generator(torch.from_numpy(image)[None],
                                 torch.from_numpy(s_img)[None])
            y = y[0].numpy()
            pngio.save_structure_png(out / "structures" / f"{path.stem}.png",
                                     smap.values, smap.kind)
            pngio.save_mask(out / "masks" / f"{path.stem}.png", msx.values)
            pngio.save_image(out / "recovered" / f"{path.stem}.png", y)
            items.append({"input": str(path), "stem": path.stem, "seed": item_seed})
        except Exception as e:  # per-image isolation
            logger.exception("recovery failed for %s", path)
            failures.append({"input": str(path), "error": str(e)})
    manifest = {
        "seed": seed,
        "count": len(items),
        "failures": failures,
        "checkpoints": {
            "translator": hashlib.sha256(
                json.dumps(tr_payload["checksums"], sort_keys=True).encode()
            ).hexdigest()[:16],
            "config": config_hash(cfg),
        },
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log(f"recovered {len(items)}/{len(files)} images into {out}")
    return manifest
