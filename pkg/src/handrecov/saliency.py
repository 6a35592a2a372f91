"""Hand saliency: pixel estimator, patch teacher pooling, MLP distillation.

One estimator serves both input kinds: images directly, structure maps after
the same [-1,1]->[0,1] remap used for storage. The pixel network is the
teacher; a four-layer MLP behind the frozen backbone learns the max-pooled
patch version of its output.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .structure import DimensionError, StructureMap, to_image_range
from .vit import ViTBackbone, extract_tokens


class NotTrainedError(RuntimeError):
    pass


class SaliencySource(str, Enum):
    from_image = "from_image"
    from_structure = "from_structure"


@dataclass
class SaliencyMap:
    values: np.ndarray  # (h,w) in [0,1]
    source: SaliencySource

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"saliency map must be (h,w), got {self.values.shape}")
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValueError("saliency values outside [0,1]")


@dataclass
class PatchSaliency:
    values: np.ndarray  # (n,) in [0,1]
    patch_size: int

    def __post_init__(self):
        if self.values.ndim != 1:
            raise DimensionError("patch saliency must be a vector")
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValueError("patch saliency outside [0,1]")


class _ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = self.conv2(y)
        return F.leaky_relu(y + self.skip(x), 0.2)


class SaliencyNet(nn.Module):
    """Two parallel header convs, 5 residual encoder blocks with stride-2
    downsampling, symmetric decoder with upsampling and same-resolution skip
    concatenation. Leaky-ReLU throughout, logistic squashing at the end."""

    def __init__(self, image_size: int, base_channels: int = 32):
        super().__init__()
        self.image_size = image_size
        c = base_channels
        widths = [min(c * 2 ** i, 512) for i in range(5)]
        self.header_a = nn.Conv2d(3, c // 2 or 1, 3, padding=1)
        self.header_b = nn.Conv2d(3, c - (c // 2 or 1), 5, padding=2)
        self.enc = nn.ModuleList()
        cin = c
        for wd in widths:
            self.enc.append(nn.Sequential(nn.Conv2d(cin, wd, 3, stride=2, padding=1),
                                          _ResBlock(wd, wd)))
            cin = wd
        self.dec = nn.ModuleList()
        for i in reversed(range(5)):
            skip_ch = widths[i - 1] if i > 0 else c
            out_ch = widths[i - 1] if i > 0 else c
            self.dec.append(_ResBlock(cin + skip_ch, out_ch))
            cin = out_ch
        self.out = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise DimensionError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}"
            )
        h0 = F.leaky_relu(torch.cat([self.header_a(x), self.header_b(x)], dim=1), 0.2)
        feats = [h0]
        h = h0
        for blk in self.enc:
            h = blk(h)
            feats.append(h)
        for i, blk in enumerate(self.dec):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(torch.cat([h, feats[-2 - i]], dim=1))
        return torch.sigmoid(self.out(h)).squeeze(1)


def _as_image_tensor(x) -> tuple[np.ndarray, SaliencySource]:
    if isinstance(x, StructureMap):
        return to_image_range(x), SaliencySource.from_structure
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected (3,h,w) image, got {arr.shape}")
    return arr, SaliencySource.from_image


def estimate_saliency(net: SaliencyNet | None, x) -> SaliencyMap:
    """Saliency from an image or a structure map, via one shared network."""
    if net is None:
        raise NotTrainedError("saliency estimator has no weights loaded")
    arr, source = _as_image_tensor(x)
    if arr.shape[1] != net.image_size or arr.shape[2] != net.image_size:
        raise DimensionError(
            f"estimator is configured for {net.image_size}, got {arr.shape[1:]}"
        )
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(arr)[None])[0].numpy()
    return SaliencyMap(values=np.clip(out, 0.0, 1.0), source=source)


def pool_patch_teacher(m: SaliencyMap, p: int) -> PatchSaliency:
    """Teacher signal: per-patch max over non-overlapping p x p tiles."""
    h, w = m.values.shape
    if h % p or w % p:
        raise DimensionError(f"({h},{w}) not divisible by patch size {p}")
    tiles = m.values.reshape(h // p, p, w // p, p)
    return PatchSaliency(values=tiles.max(axis=(1, 3)).reshape(-1), patch_size=p)


class PatchSaliencyMLP(nn.Module):
    """Four-layer head regressing patch saliency from backbone tokens."""

    def __init__(self, token_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(token_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(tokens)).squeeze(-1)


def distill_loss(pred: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """MSE between MLP patch predictions and the pooled teacher, (b,n) each."""
    if pred.shape != teacher.shape:
        raise DimensionError(
            f"token count {tuple(pred.shape)} != teacher {tuple(teacher.shape)}"
        )
    return F.mse_loss(pred, teacher)


def distill_patch_mlp(
    mlp: PatchSaliencyMLP, tokens: torch.Tensor, teacher: PatchSaliency
) -> torch.Tensor:
    """Single-item distillation step value; backbone tokens are detached so
    gradients only reach the MLP."""
    t = torch.from_numpy(teacher.values.astype(np.float32))[None]
    pred = mlp(tokens.detach()[None] if tokens.ndim == 2 else tokens.detach())
    return distill_loss(pred, t)


def patch_saliency(
    mlp: PatchSaliencyMLP, backbone: ViTBackbone, images: torch.Tensor
) -> torch.Tensor:
    """(b,n) patch saliency from the frozen backbone + distilled head."""
    with torch.no_grad():
        tokens = extract_tokens(backbone, images)
    return mlp(tokens)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_estimator(
    net: SaliencyNet,
    images: np.ndarray,
    masks: np.ndarray,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Binary cross-entropy on (image, mask) pairs; images may mix RGB and
    remapped structure maps so one net serves both."""
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(images)
    y = torch.from_numpy(masks)
    losses = []
    net.train()
    for step in range(steps):
        idx = torch.randint(0, x.shape[0], (min(batch_size, x.shape[0]),), generator=gen)
        pred = net(x[idx])
        loss = F.binary_cross_entropy(pred.clamp(1e-6, 1 - 1e-6), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log and (step + 1) % 100 == 0:
            log(f"saliency step {step + 1}/{steps} loss {loss:.4f}")
    net.eval()
    return losses


def train_distill(
    mlp: PatchSaliencyMLP,
    backbone: ViTBackbone,
    teacher_net: SaliencyNet,
    images: np.ndarray,
    patch_size: int,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    log=None,
) -> list[float]:
    opt = torch.optim.Adam(mlp.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(images)
    teacher_net.eval()
    losses = []
    for step in range(steps):
        idx = torch.randint(0, x.shape[0], (min(batch_size, x.shape[0]),), generator=gen)
        batch = x[idx]
        with torch.no_grad():
            m = teacher_net(batch)  # (b,h,w)
            b, h, w = m.shape
            tiles = m.reshape(b, h // patch_size, patch_size, w // patch_size, patch_size)
            target = tiles.amax(dim=(2, 4)).reshape(b, -1)
            tokens = extract_tokens(backbone, batch)
        pred = mlp(tokens)
        loss = distill_loss(pred, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log and (step + 1) % 100 == 0:
            log(f"distill step {step + 1}/{steps} loss {loss:.4f}")
    return losses
