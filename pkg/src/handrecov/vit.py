"""Frozen ViT feature backbone and its optional self-distillation pretraining.

The backbone tokenizes images into (h/p)*(w/p) patch tokens plus a class
token. The desk-scale variant trains briefly with an EMA-teacher recipe on
the synthetic image set and is then frozen; a full pretrained base model
(width 768, 12 blocks, patch 16) can be loaded from a state-dict file
instead. All downstream consumers treat the backbone as read-only.
"""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def sincos_position_embeddings(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sin-cos table, (grid*grid, dim)."""
    if dim % 4 != 0:
        raise ValueError("embedding width must be divisible by 4")
    coords = torch.arange(grid, dtype=torch.float64)
    omega = torch.arange(dim // 4, dtype=torch.float64) / (dim // 4)
    omega = 1.0 / (10000.0 ** omega)
    out = []
    for axis in torch.meshgrid(coords, coords, indexing="ij"):
        angles = axis.reshape(-1)[:, None] * omega[None, :]
        out.extend([torch.sin(angles), torch.cos(angles)])
    return torch.cat(out, dim=1).float()


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class ViTBackbone(nn.Module):
    """Patch tokens + class token; fixed sin-cos position embeddings."""

    def __init__(self, image_size=256, patch_size=16, width=192, depth=12, heads=3):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.width = width
        self.grid = image_size // patch_size
        self.num_patches = self.grid * self.grid
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        pos = torch.zeros(1, self.num_patches + 1, width)
        pos[0, 1:] = sincos_position_embeddings(self.grid, width)
        self.register_buffer("pos_embed", pos)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        nn.init.normal_(self.cls_token, std=0.02)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """images: (b,3,h,w) in [0,1] -> (patch tokens (b,n,d), class token (b,d))."""
        b, _, h, w = images.shape
        if h != self.image_size or w != self.image_size:
            raise ValueError(
                f"backbone expects {self.image_size}x{self.image_size}, got {h}x{w}"
            )
        x = self.patch_embed(images * 2.0 - 1.0).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 1:], x[:, 0]

    def freeze(self) -> "ViTBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def extract_tokens(backbone: ViTBackbone, images: torch.Tensor) -> torch.Tensor:
    """Patch tokens of a frozen backbone, gradient flowing to the input only."""
    tokens, _ = backbone(images)
    return tokens


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def seeded_backbone(image_size, patch_size, width, depth, heads, seed) -> ViTBackbone:
    """Deterministic random-init backbone, frozen. The seed pins the weights
    so every stage sees the identical feature space."""
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ViTBackbone(image_size, patch_size, width, depth, heads)
    del gen
    return net.freeze()


# ---------------------------------------------------------------------------
# Self-distillation pretraining (EMA teacher over two augmented views)
# ---------------------------------------------------------------------------

class _ProjectionHead(nn.Module):
    def __init__(self, width, hidden=256, out=64, prototypes=128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, out)
        )
        self.prototypes = nn.Linear(out, prototypes, bias=False)

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return self.prototypes(z)


def _augment_views(images: torch.Tensor, gen: torch.Generator):
    """Two stochastic views: flip, crop-resize, brightness/contrast jitter."""
    views = []
    b, _, h, w = images.shape
    for _ in range(2):
        v = images
        if torch.rand((), generator=gen) < 0.5:
            v = torch.flip(v, dims=[3])
        scale = float(0.6 + 0.4 * torch.rand((), generator=gen))
        ch = max(8, int(h * scale))
        top = int(torch.randint(0, h - ch + 1, (), generator=gen))
        left = int(torch.randint(0, w - ch + 1, (), generator=gen))
        v = F.interpolate(v[:, :, top:top + ch, left:left + ch], size=(h, w),
                          mode="bilinear", align_corners=False)
        gain = 0.75 + 0.5 * torch.rand((1, 3, 1, 1), generator=gen)
        bias = 0.2 * (torch.rand((1, 3, 1, 1), generator=gen) - 0.5)
        views.append((v * gain + bias).clamp(0.0, 1.0))
    return views


def self_distill(
    backbone: ViTBackbone,
    images: torch.Tensor,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    momentum: float = 0.996,
    log_every: int = 50,
) -> list[float]:
    """Train the backbone in place with an EMA-teacher objective, then freeze.

    images: (N,3,h,w) pool the views are drawn from. Returns the loss trace.
    """
    for p in backbone.parameters():
        p.requires_grad_(True)
    backbone.train()
    head = _ProjectionHead(backbone.width)
    teacher = copy.deepcopy(backbone)
    teacher_head = copy.deepcopy(head)
    for p in list(teacher.parameters()) + list(teacher_head.parameters()):
        p.requires_grad_(False)

    opt = torch.optim.Adam(
        list(backbone.parameters()) + list(head.parameters()), lr=lr
    )
    gen = torch.Generator().manual_seed(seed)
    center = torch.zeros(1, head.prototypes.out_features)
    t_student, t_teacher = 0.1, 0.04
    losses = []
    n = images.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = images[idx]
        v1, v2 = _augment_views(batch, gen)
        with torch.no_grad():
            t_out = [teacher_head(teacher(v)[1]) for v in (v1, v2)]
            t_prob = [F.softmax((t - center) / t_teacher, dim=-1) for t in t_out]
            center = 0.9 * center + 0.1 * torch.cat(t_out).mean(dim=0, keepdim=True)
        s_out = [head(backbone(v)[1]) for v in (v1, v2)]
        loss = 0.0
        for (ti, si) in ((0, 1), (1, 0)):
            loss = loss - (t_prob[ti] * F.log_softmax(s_out[si] / t_student, dim=-1)).sum(-1).mean()
        loss = loss / 2.0
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for ps, pt in zip(backbone.parameters(), teacher.parameters()):
                pt.mul_(momentum).add_(ps, alpha=1 - momentum)
            for ps, pt in zip(head.parameters(), teacher_head.parameters()):
                pt.mul_(momentum).add_(ps, alpha=1 - momentum)
        losses.append(float(loss.detach()))
    backbone.freeze()
    return losses
