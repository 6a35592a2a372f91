"""Structure sketcher: frozen backbone tokens -> saliency-guided masking ->
attention decoder -> structure tokens -> decoded map.

Masking draws a fixed count of patches without replacement, weighted toward
low hand-saliency patches, so the hand itself must be reconstructed from
context. Supervised training regresses the frozen tokenizer's logits from
both the image and its ground-truth map; fine-tuning exploits the sketcher
fixed-point property on unlabeled images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .saliency import PatchSaliency, PatchSaliencyMLP
from .structure import DimensionError, StructureMap, to_image_range
from .tokenizer import (GRID, ParameterError, StructureTokenizer, TokenGrid,
                        finalize_map, gumbel_sample)
from .vit import Block, ViTBackbone, sincos_position_embeddings


class NotTrainedError(RuntimeError):
    pass


@dataclass
class MaskSelection:
    masked_indices: np.ndarray  # sorted unique ints in [0,n)
    ratio: float
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.masked_indices)
        if idx.ndim != 1 or len(np.unique(idx)) != len(idx):
            raise ValueError("masked indices must be unique")
        self.masked_indices = np.sort(idx.astype(np.int64))


def mask_weights(m: np.ndarray | torch.Tensor, epsilon: float) -> torch.Tensor:
    """Multinomial weights (1 - m + epsilon); epsilon keeps every patch
    selectable even at saliency 1."""
    t = torch.as_tensor(m, dtype=torch.float64)
    return 1.0 - t + epsilon


def sample_mask(
    m: PatchSaliency | np.ndarray,
    ratio: float,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> MaskSelection:
    """Draw floor(ratio * n) distinct patch indices without replacement."""
    values = m.values if isinstance(m, PatchSaliency) else np.asarray(m)
    n = values.shape[-1]
    if not (0.0 < ratio < 1.0):
        raise ParameterError(f"mask ratio must lie in (0,1), got {ratio}")
    k = int(ratio * n)
    if k < 1:
        raise ParameterError(f"ratio {ratio} with n={n} selects no patches")
    if ((values < 0) | (values > 1)).any():
        raise ValueError("patch saliency outside [0,1]")
    gen = torch.Generator().manual_seed(seed)
    w = mask_weights(values, epsilon)
    idx = torch.multinomial(w, k, replacement=False, generator=gen).numpy()
    return MaskSelection(masked_indices=idx, ratio=ratio, seed=seed)


def batched_mask_indices(
    m: torch.Tensor, ratio: float, epsilon: float, generator: torch.Generator
) -> torch.Tensor:
    """(b,n) saliency -> (b,k) masked indices, independent per row."""
    n = m.shape[-1]
    k = int(ratio * n)
    if k < 1:
        raise ParameterError("mask ratio selects no patches")
    w = (1.0 - m.detach().double() + epsilon).clamp_min(epsilon * 1e-3)
    return torch.multinomial(w, k, replacement=False, generator=generator)


def apply_mask(
    tokens: torch.Tensor, sel: MaskSelection | torch.Tensor, mask_token: torch.Tensor
) -> torch.Tensor:
    """Replace selected token rows with the learnable mask token.

    tokens: (n,d) or (b,n,d); sel: MaskSelection or (b,k) index tensor.
    Unselected rows pass through bit-identical.
    """
    if isinstance(sel, MaskSelection):
        idx = torch.from_numpy(sel.masked_indices)
        if tokens.ndim == 2:
            out = tokens.clone()
            out[idx] = mask_token.to(tokens.dtype)
            return out
        out = tokens.clone()
        out[:, idx] = mask_token.to(tokens.dtype)
        return out
    if tokens.ndim != 3:
        raise DimensionError("batched masking needs (b,n,d) tokens")
    out = tokens.clone()
    b, n, d = tokens.shape
    flat = sel + n * torch.arange(b, device=sel.device)[:, None]
    out.reshape(b * n, d)[flat.reshape(-1)] = mask_token.to(tokens.dtype)
    return out


class SketcherDecoder(nn.Module):
    """Attention decoder over masked backbone tokens, emitting per-cell
    codebook logits. Position embeddings are fixed sin-cos tables."""

    def __init__(self, token_dim: int, width: int = 192, depth: int = 12,
                 heads: int = 3, codebook_size: int = 512, grid: int = GRID):
        super().__init__()
        if grid * grid <= 0:
            raise ParameterError("bad grid")
        self.grid = grid
        self.proj = nn.Linear(token_dim, width)
        pos = sincos_position_embeddings(grid, width)[None]
        self.register_buffer("pos_embed", pos)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, codebook_size)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, _ = tokens.shape
        if n != self.grid * self.grid:
            raise DimensionError(
                f"decoder expects {self.grid * self.grid} tokens, got {n}"
            )
        x = self.proj(tokens) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        logits = self.head(self.norm(x))  # (b,n,K)
        return logits.transpose(1, 2).reshape(b, -1, self.grid, self.grid)


class SketcherModel(nn.Module):
    """Frozen backbone + learnable mask token + decoder + tokenizer refs."""

    def __init__(
        self,
        backbone: ViTBackbone,
        tokenizer: StructureTokenizer,
        saliency_mlp: PatchSaliencyMLP,
        mask_ratio: float = 0.75,
        mask_epsilon: float = 1e-5,
        decoder_width: int = 192,
        decoder_depth: int = 12,
        decoder_heads: int = 3,
    ):
        super().__init__()
        self.backbone = backbone.freeze()
        self.tokenizer = tokenizer
        self.saliency_mlp = saliency_mlp
        self.mask_ratio = mask_ratio
        self.mask_epsilon = mask_epsilon
        self.mask_token = nn.Parameter(torch.zeros(backbone.width))
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder = SketcherDecoder(
            backbone.width, decoder_width, decoder_depth, decoder_heads,
            tokenizer.codebook_size,
        )

    def decode_structure_tokens(self, masked_tokens: torch.Tensor) -> torch.Tensor:
        return self.decoder(masked_tokens)

    def patch_saliency(self, tokens: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.saliency_mlp(tokens).clamp(0.0, 1.0)

    def sketch_batch(
        self,
        images: torch.Tensor,
        generator: torch.Generator,
        tau: float = 0.5,
        hard: bool = True,
        use_gumbel: bool = True,
    ) -> torch.Tensor:
        """Differentiable pipeline: (b,3,h,w) images in [0,1] -> raw decoded
        maps (tanh range). Gradients flow through the decoded tokens via the
        straight-through hard sample."""
        tokens, _ = self.backbone(images)
        sal = self.patch_saliency(tokens.detach())
        idx = batched_mask_indices(sal, self.mask_ratio, self.mask_epsilon, generator)
        masked = apply_mask(tokens, idx, self.mask_token)
        logits = self.decoder(masked)
        if use_gumbel:
            weights, _ = gumbel_sample(logits, tau, hard=hard, generator=generator)
        else:
            hard_idx = logits.argmax(dim=1)
            one_hot = F.one_hot(hard_idx, logits.shape[1]).movedim(-1, 1).float()
            soft = F.softmax(logits / tau, dim=1)
            weights = one_hot + soft - soft.detach()
        emb = self.tokenizer.embed_weights(weights)
        return self.tokenizer.decoder(emb)

    def sketch(self, x, seed: int = 0) -> StructureMap:
        """Deterministic inference: image (3,h,w) numpy in [0,1] or a
        StructureMap; mask drawn from `seed`, tokens picked by argmax."""
        if isinstance(x, StructureMap):
            arr = to_image_range(x)
        else:
            arr = np.asarray(x, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DimensionError(f"expected (3,h,w) input, got {arr.shape}")
        self.eval()
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            images = torch.from_numpy(arr)[None]
            tokens, _ = self.backbone(images)
            sal = self.patch_saliency(tokens)
            idx = batched_mask_indices(sal, self.mask_ratio, self.mask_epsilon, gen)
            masked = apply_mask(tokens, idx, self.mask_token)
            logits = self.decoder(masked)
            hard_idx = logits.argmax(dim=1)
            emb = self.tokenizer.codebook(hard_idx).permute(0, 3, 1, 2)
            raw = self.tokenizer.decoder(emb)[0].numpy()
        return finalize_map(raw, self.tokenizer.kind)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def supervised_token_loss(
    pred_image: torch.Tensor, pred_structure: torch.Tensor, target: torch.Tensor
) -> torch.Tensor:
    """Two-branch regression in the tokenizer's logit space (mean-square)."""
    return F.mse_loss(pred_image, target) + F.mse_loss(pred_structure, target)


def fixedpoint_residual(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Mean-square residual between the two sketch passes."""
    return F.mse_loss(first, second)


def supervised_loss(
    model: SketcherModel,
    images: torch.Tensor,
    s_star: torch.Tensor,
    generator: torch.Generator,
) -> torch.Tensor:
    """Eq-style two-branch loss; each branch samples its own mask."""
    with torch.no_grad():
        target = model.tokenizer.encoder(s_star)
    structure_as_image = (s_star + 1.0) / 2.0

    def branch(imgs):
        tokens, _ = model.backbone(imgs)
        sal = model.patch_saliency(tokens)
        idx = batched_mask_indices(sal, model.mask_ratio, model.mask_epsilon, generator)
        masked = apply_mask(tokens, idx, model.mask_token)
        return model.decoder(masked)

    return supervised_token_loss(branch(images), branch(structure_as_image), target)


def fixedpoint_loss(
    model: SketcherModel,
    images: torch.Tensor,
    generator: torch.Generator,
    tau: float = 0.5,
    second_pass_gradient: bool = True,
) -> torch.Tensor:
    """Residual between sketching an image and re-sketching its own output.

    The second pass consumes the first pass's decoded map remapped to image
    range; with second_pass_gradient=False the outer pass is a fixed target.
    """
    first = model.sketch_batch(images, generator, tau=tau)
    second_input = ((first + 1.0) / 2.0).clamp(0.0, 1.0)
    second = model.sketch_batch(second_input, generator, tau=tau)
    if not second_pass_gradient:
        second = second.detach()
    return fixedpoint_residual(first, second)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_supervised(
    model: SketcherModel,
    images: torch.Tensor,
    s_star: torch.Tensor,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    log=None,
    start_step: int = 0,
    opt_state: dict | None = None,
):
    params = list(model.decoder.parameters()) + [model.mask_token]
    opt = torch.optim.Adam(params, lr=lr)
    if opt_state:
        opt.load_state_dict(opt_state)
    gen = torch.Generator().manual_seed(seed + start_step)
    n = images.shape[0]
    history = []
    for step in range(start_step, steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        loss = supervised_loss(model, images[idx], s_star[idx], gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": float(loss.detach())})
        if log and (step + 1) % 100 == 0:
            log(f"sketch_sup step {step + 1}/{steps} loss {loss:.4f}")
    return history, opt.state_dict()


def train_fixedpoint(
    model: SketcherModel,
    labeled_images: torch.Tensor,
    labeled_s_star: torch.Tensor,
    unlabeled_images: torch.Tensor,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    labeled_ratio: int = 1,
    tau: float = 0.5,
    second_pass_gradient: bool = True,
    seed: int = 0,
    log=None,
    start_step: int = 0,
    opt_state: dict | None = None,
):
    """Alternate supervised and fixed-point steps (labeled_ratio : 1); the
    fixed-point term trains the decoder and the tokenizer's map decoder."""
    params = (list(model.decoder.parameters()) + [model.mask_token]
              + list(model.tokenizer.decoder.parameters()))
    opt = torch.optim.Adam(params, lr=lr)
    if opt_state:
        opt.load_state_dict(opt_state)
    gen = torch.Generator().manual_seed(seed + 1 + start_step)
    cycle = labeled_ratio + 1
    history = []
    for step in range(start_step, steps):
        if step % cycle < labeled_ratio:
            idx = torch.randint(0, labeled_images.shape[0],
                                (min(batch_size, labeled_images.shape[0]),), generator=gen)
            loss = supervised_loss(model, labeled_images[idx], labeled_s_star[idx], gen)
            kind = "labeled"
        else:
            idx = torch.randint(0, unlabeled_images.shape[0],
                                (min(batch_size, unlabeled_images.shape[0]),), generator=gen)
            loss = fixedpoint_loss(model, unlabeled_images[idx], gen, tau=tau,
                                   second_pass_gradient=second_pass_gradient)
            kind = "fixedpoint"
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": float(loss.detach()), "kind": kind})
        if log and (step + 1) % 100 == 0:
            log(f"sketch_fp step {step + 1}/{steps} {kind} loss {loss:.4f}")
    return history, opt.state_dict()


def mean_fixedpoint_residual(
    model: SketcherModel, images: np.ndarray, seed: int = 0
) -> float:
    """Deterministic eval-mode residual: per-image seeded masks, argmax
    token decisions, mean-square difference of the two passes."""
    model.eval()
    total = 0.0
    for i in range(images.shape[0]):
        s1 = model.sketch(images[i], seed=seed + 2 * i)
        s2 = model.sketch(s1, seed=seed + 2 * i + 1)
        total += float(((s1.values - s2.values) ** 2).mean())
    return total / images.shape[0]
