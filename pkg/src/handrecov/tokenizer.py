"""Discrete VAE over the structure domain: conv encoder, 512-entry codebook,
transpose-conv decoder, Gumbel-relaxed sampling.

Maps are compressed to a fixed 16x16 grid of codebook logits regardless of
resolution (the encoder adapts its stride count), trained with the uniform
KL regularizer, reconstruction MSE, and an adversarial term from the
multi-scale patch discriminator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .structure import DimensionError, KIND_CHANNELS, StructureMap

GRID = 16


class ParameterError(ValueError):
    pass


@dataclass
class TokenGrid:
    """Codebook-space view of one map: pre-sample logits, hard indices, and
    the embedded representation. Fields are filled as the pipeline produces
    them; indices always agree with argmax of the (sampled) logits."""

    logits: torch.Tensor | None = None      # (K,g,g)
    indices: torch.Tensor | None = None     # (g,g) int64
    embeddings: torch.Tensor | None = None  # (d,g,g)

    def __post_init__(self):
        for t, nd in ((self.logits, 3), (self.indices, 2), (self.embeddings, 3)):
            if t is not None and t.ndim != nd:
                raise DimensionError("token grid field has wrong rank")
        if self.logits is not None and self.logits.shape[-2:] != (GRID, GRID):
            raise DimensionError(f"token grid must be {GRID}x{GRID}")


class _Stage(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv1 = nn.Conv2d(cout, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.down(x))
        y = F.relu(self.conv1(x))
        return F.relu(x + self.conv2(y))


class TokenizerEncoder(nn.Module):
    """Four-stage strided conv net ending in per-cell codebook logits."""

    def __init__(self, image_size: int, kind: str = "normal",
                 codebook_size: int = 512, base_channels: int = 64):
        super().__init__()
        if image_size % GRID != 0:
            raise DimensionError("image size must be a multiple of the token grid")
        n_down = int(math.log2(image_size // GRID))
        if 2 ** n_down * GRID != image_size:
            raise DimensionError("image_size / 16 must be a power of two")
        if n_down > 4:
            raise DimensionError("encoder supports at most 16x downsampling")
        self.image_size = image_size
        self.kind = kind
        c = base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        strides = [2] * n_down + [1] * (4 - n_down)
        self.stem = nn.Conv2d(KIND_CHANNELS[kind], c, 3, padding=1)
        self.stages = nn.ModuleList()
        cin = c
        for wd, st in zip(widths, strides):
            self.stages.append(_Stage(cin, wd, st))
            cin = wd
        self.head = nn.Conv2d(cin, codebook_size, 1)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        if maps.shape[-1] != self.image_size or maps.shape[-2] != self.image_size:
            raise DimensionError(
                f"encoder expects {self.image_size}, got {tuple(maps.shape[-2:])}"
            )
        x = F.relu(self.stem(maps))
        for s in self.stages:
            x = s(x)
        return self.head(x)


class TokenizerDecoder(nn.Module):
    """Symmetric transpose-conv decoder from embedded tokens to a map."""

    def __init__(self, image_size: int, kind: str = "normal",
                 embed_dim: int = 512, base_channels: int = 64):
        super().__init__()
        n_up = int(math.log2(image_size // GRID))
        self.image_size = image_size
        self.kind = kind
        c = base_channels
        widths = [8 * c, 4 * c, 2 * c, c]
        self.stem = nn.Conv2d(embed_dim, widths[0], 3, padding=1)
        layers = []
        cin = widths[0]
        ups = [False] * (4 - n_up) + [True] * n_up
        for wd, up in zip(widths, ups):
            if up:
                layers.append(nn.ConvTranspose2d(cin, wd, 4, stride=2, padding=1))
            else:
                layers.append(nn.Conv2d(cin, wd, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            layers.append(nn.Conv2d(wd, wd, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            cin = wd
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, KIND_CHANNELS[kind], 3, padding=1)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.stem(emb))
        x = self.body(x)
        return torch.tanh(self.out(x))


class StructureTokenizer(nn.Module):
    """Encoder + codebook + decoder bundle (T_s, the codebook, F_s)."""

    def __init__(self, image_size: int, kind: str = "normal",
                 codebook_size: int = 512, embed_dim: int = 512,
                 base_channels: int = 64):
        super().__init__()
        self.codebook_size = codebook_size
        self.kind = kind
        self.encoder = TokenizerEncoder(image_size, kind, codebook_size, base_channels)
        self.codebook = nn.Embedding(codebook_size, embed_dim)
        self.decoder = TokenizerDecoder(image_size, kind, embed_dim, base_channels)

    # -- single-map typed API ------------------------------------------------
    def encode(self, m: StructureMap) -> TokenGrid:
        if m.kind != self.kind:
            raise DimensionError(f"tokenizer is for {self.kind} maps, got {m.kind}")
        self.eval()
        with torch.no_grad():
            logits = self.encoder(torch.from_numpy(m.values)[None])[0]
        return TokenGrid(logits=logits, indices=logits.argmax(dim=0))

    def decode(self, grid: TokenGrid, renormalize: bool = True) -> StructureMap:
        if grid.embeddings is not None:
            emb = grid.embeddings[None]
        elif grid.indices is not None:
            emb = self.codebook(grid.indices[None]).permute(0, 3, 1, 2)
        elif grid.logits is not None:
            emb = self.codebook(grid.logits.argmax(dim=0)[None]).permute(0, 3, 1, 2)
        else:
            raise ParameterError("token grid carries nothing to decode")
        self.eval()
        with torch.no_grad():
            raw = self.decoder(emb)[0].numpy()
        return finalize_map(raw, self.kind, renormalize)

    def embed_weights(self, weights: torch.Tensor) -> torch.Tensor:
        """(b,K,g,g) simplex/one-hot weights -> (b,d,g,g) embeddings."""
        return torch.einsum("bkhw,kd->bdhw", weights, self.codebook.weight)


def finalize_map(raw: np.ndarray, kind: str, renormalize: bool = True) -> StructureMap:
    """Decoder output -> StructureMap. Normal kind: pixels with norm > 0.1
    are renormalized to unit length, the rest become background zeros."""
    if kind == "normal":
        norms = np.linalg.norm(raw, axis=0)
        fg = norms > 0.1
        values = np.zeros_like(raw)
        if renormalize:
            values[:, fg] = raw[:, fg] / norms[fg]
        else:
            values[:, fg] = raw[:, fg]
        return StructureMap(values=values.astype(np.float32), kind="normal",
                            background_mask=~fg)
    if kind == "depth":
        vals = np.clip(raw, 0.0, None)
        fg = vals[0] > 1e-3
        return StructureMap(values=vals.astype(np.float32) * fg,
                            kind="depth", background_mask=~fg)
    vals = np.clip((raw + 1.0) / 2.0, 0.0, 1.0)
    fg = (vals > 1e-3).any(axis=0)
    return StructureMap(values=(vals * fg).astype(np.float32), kind="iuv",
                        background_mask=~fg)


# ---------------------------------------------------------------------------
# Gumbel sampling
# ---------------------------------------------------------------------------

def gumbel_sample(
    logits: torch.Tensor,
    tau: float,
    hard: bool,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Relaxed categorical sample over the codebook axis.

    logits: (...,K,g,g) with K on dim -3. Soft mode returns simplex weights;
    hard mode returns straight-through one-hots (one-hot forward, soft
    backward). Also returns the argmax indices.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    gumbel = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
    soft = F.softmax((logits + gumbel) / tau, dim=-3)
    idx = soft.argmax(dim=-3)
    if not hard:
        return soft, idx
    one_hot = F.one_hot(idx, num_classes=logits.shape[-3])
    one_hot = one_hot.movedim(-1, -3).to(soft.dtype)
    # (soft - soft.detach()) is exactly zero forward, identity backward
    return one_hot + (soft - soft.detach()), idx


# ---------------------------------------------------------------------------
# Losses (uniform KL + reconstruction + adversarial)
# ---------------------------------------------------------------------------

def uniform_kl(logits: torch.Tensor) -> torch.Tensor:
    """Mean per-cell KL(softmax(logits) || uniform); bounded by ln K."""
    logp = F.log_softmax(logits, dim=-3)
    p = logp.exp()
    k = logits.shape[-3]
    kl = (p * logp).sum(dim=-3) + math.log(k)
    return kl.mean()


def adversarial_generator_term(disc, fake: torch.Tensor) -> torch.Tensor:
    """L1 distance of every discriminator scale's scores to the real target."""
    scores = disc(fake)
    return torch.stack([(s - 1.0).abs().mean() for s in scores]).mean()


def tokenizer_loss(
    s_star: torch.Tensor,
    s_hat: torch.Tensor,
    logits: torch.Tensor,
    discriminator,
    kl_weight: float,
    adv_weight: float = 0.01,
) -> dict[str, torch.Tensor]:
    """Total = kl_weight * KL + MSE + adv_weight * adversarial."""
    kl = uniform_kl(logits)
    mse = F.mse_loss(s_hat, s_star)
    adv = adversarial_generator_term(discriminator, s_hat)
    total = kl_weight * kl + mse + adv_weight * adv
    return {"total": total, "kl": kl, "mse": mse, "adv": adv}


def tau_schedule(step: int, start: float, end: float, ramp_steps: int) -> float:
    if ramp_steps <= 0 or step >= ramp_steps:
        return end
    return start + (end - start) * step / ramp_steps


def kl_weight_schedule(step: int, max_weight: float, ramp_steps: int) -> float:
    if ramp_steps <= 0 or step >= ramp_steps:
        return max_weight
    return max_weight * step / ramp_steps


def train_tokenizer(
    model: StructureTokenizer,
    discriminator,
    maps: torch.Tensor,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    kl_weight_max: float = 6.6e-7,
    kl_ramp_steps: int = 5000,
    adv_weight: float = 0.01,
    tau_start: float = 1.0,
    tau_end: float = 0.5,
    tau_ramp_steps: int = 5000,
    seed: int = 0,
    val_maps: torch.Tensor | None = None,
    val_every: int = 0,
    log=None,
    start_step: int = 0,
    opt_state: dict | None = None,
):
    """Alternating discriminator / autoencoder updates on a map tensor pool.

    Returns (history, opt_states) where history holds per-step loss dicts and
    optional validation MSE entries.
    """
    opt_g = torch.optim.Adam(model.parameters(), lr=lr)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=lr)
    if opt_state:
        opt_g.load_state_dict(opt_state["g"])
        opt_d.load_state_dict(opt_state["d"])
    gen = torch.Generator().manual_seed(seed + start_step)
    n = maps.shape[0]
    history = []
    model.train()
    for step in range(start_step, steps):
        tau = tau_schedule(step, tau_start, tau_end, tau_ramp_steps)
        klw = kl_weight_schedule(step, kl_weight_max, kl_ramp_steps)
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = maps[idx]

        # Soft relaxation while training (every codebook entry receives
        # gradient); evaluation decodes hard argmax picks.
        logits = model.encoder(batch)
        weights, _ = gumbel_sample(logits, tau, hard=False, generator=gen)
        s_hat = model.decoder(model.embed_weights(weights))

        d_real = discriminator(batch)
        d_fake = discriminator(s_hat.detach())
        loss_d = torch.stack(
            [(r - 1.0).abs().mean() + (f - 0.0).abs().mean()
             for r, f in zip(d_real, d_fake)]
        ).mean() / 2.0
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        terms = tokenizer_loss(batch, s_hat, logits, discriminator, klw, adv_weight)
        opt_g.zero_grad()
        terms["total"].backward()
        opt_g.step()

        rec = {k: float(v.detach()) for k, v in terms.items()}
        rec["d"] = float(loss_d)
        rec["tau"] = tau
        rec["step"] = step
        if val_maps is not None and val_every and (step + 1) % val_every == 0:
            rec["val_mse"] = float(validation_mse(model, val_maps))
            model.train()
        history.append(rec)
        if log and (step + 1) % 100 == 0:
            log(f"tokenizer step {step + 1}/{steps} mse {rec['mse']:.5f} d {rec['d']:.3f}")
    model.eval()
    return history, {"g": opt_g.state_dict(), "d": opt_d.state_dict()}


def validation_mse(model: StructureTokenizer, maps: torch.Tensor,
                   batch_size: int = 32) -> float:
    """Hard-argmax round-trip MSE (the published-protocol reconstruction)."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, maps.shape[0], batch_size):
            batch = maps[i:i + batch_size]
            logits = model.encoder(batch)
            idx = logits.argmax(dim=1)
            emb = model.codebook(idx).permute(0, 3, 1, 2)
            s_hat = model.decoder(emb)
            total += float(((s_hat - batch) ** 2).mean()) * batch.shape[0]
            count += batch.shape[0]
    return total / count


def codebook_usage(model: StructureTokenizer, maps: torch.Tensor,
                   batch_size: int = 32) -> float:
    """Fraction of codebook entries selected at least once over a map set."""
    used = torch.zeros(model.codebook_size, dtype=torch.bool)
    model.eval()
    with torch.no_grad():
        for i in range(0, maps.shape[0], batch_size):
            idx = model.encoder(maps[i:i + batch_size]).argmax(dim=1)
            used[idx.reshape(-1)] = True
    return float(used.float().mean())
