"""Standardized structure domain: maps, augmentation, prior dataset.

The canonical kind is the camera-space normal map (3 channels, unit vectors
on the hand, zero on background). Depth (1 channel) and IUV (2 channels)
exist for ablations and use plain spatial augmentation; only the normal
kind rotates its vectors alongside the pixel grid.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .hand import ProceduralHand, sample_hand
from .render import render_structure_arrays

KIND_CHANNELS = {"normal": 3, "depth": 1, "iuv": 2}


class StructureKindError(TypeError):
    pass


class DimensionError(ValueError):
    pass


@dataclass
class StructureMap:
    values: np.ndarray        # (c,h,w) float32
    kind: str                 # normal | depth | iuv
    background_mask: np.ndarray  # (h,w) bool, True on background

    def __post_init__(self):
        c = KIND_CHANNELS.get(self.kind)
        if c is None:
            raise StructureKindError(f"unknown structure kind {self.kind!r}")
        if self.values.ndim != 3 or self.values.shape[0] != c:
            raise DimensionError(
                f"{self.kind} map needs shape ({c},h,w), got {self.values.shape}"
            )
        if self.background_mask.shape != self.values.shape[1:]:
            raise DimensionError("background_mask must match spatial dims")

    @property
    def foreground(self) -> np.ndarray:
        return ~self.background_mask

    def check_invariants(self, tol: float = 1e-3) -> None:
        if self.kind == "normal":
            norms = np.linalg.norm(self.values, axis=0)
            fg = self.foreground
            if fg.any() and not np.allclose(norms[fg], 1.0, atol=tol):
                raise ValueError("foreground normals are not unit length")
            if (~fg).any() and not np.all(norms[~fg] < 1e-6):
                raise ValueError("background normals are not zero")
        elif self.kind == "depth":
            if (self.values < 0).any():
                raise ValueError("depth map has negative values")
        elif self.kind == "iuv":
            if ((self.values < 0) | (self.values > 1)).any():
                raise ValueError("iuv values outside [0,1]")


def render_structure(hand: ProceduralHand, kind: str, image_size: int) -> StructureMap:
    values, background, _ = render_structure_arrays(hand, kind, image_size)
    return StructureMap(values=values, kind=kind, background_mask=background)


def to_image_range(m: StructureMap) -> np.ndarray:
    """Map any structure kind to a (3,h,w) image-range tensor in [0,1].

    Normals use the same affine [-1,1]->[0,1] as storage; depth is scaled by
    the storage constant and replicated; IUV pads a zero third channel. With
    this remap one saliency/backbone network serves images and maps alike.
    """
    if m.kind == "normal":
        return ((m.values + 1.0) / 2.0).astype(np.float32)
    if m.kind == "depth":
        d = np.clip(m.values[0] / pngio.DEPTH_SCALE, 0.0, 1.0)
        return np.repeat(d[None], 3, axis=0).astype(np.float32)
    pad = np.zeros_like(m.values[:1])
    return np.concatenate([m.values, pad], axis=0).astype(np.float32)


def normals_from_image_range(img: np.ndarray) -> StructureMap:
    """Inverse of to_image_range for the normal kind (renormalizing)."""
    vec = img.astype(np.float32) * 2.0 - 1.0
    norms = np.linalg.norm(vec, axis=0)
    fg = norms > 0.1
    out = np.zeros_like(vec)
    out[:, fg] = vec[:, fg] / norms[fg]
    return StructureMap(values=out, kind="normal", background_mask=~fg)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _affine_inverse(theta: float, flip_ud: bool, flip_lr: bool, scale: float) -> np.ndarray:
    """Inverse pixel map in (col,row) offsets about the image center.

    Forward order: flips, then in-plane rotation by theta (about the optical
    axis, x-right / y-up camera frame), then zoom. A scene rotation by theta
    moves pixel offsets by R(-theta) in (col,row) coordinates, because the
    row axis points opposite the camera's y.
    """
    c, s = math.cos(theta), math.sin(theta)
    rot_inv = np.array([[c, -s], [s, c]])  # inverse of R(-theta) in (col,row)
    flip = np.diag([-1.0 if flip_lr else 1.0, -1.0 if flip_ud else 1.0])
    return flip @ rot_inv / scale


def _resample(values: np.ndarray, fg: np.ndarray, inv: np.ndarray, interpolation: str):
    c, h, w = values.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    src = np.stack([jj - cx, ii - cy], axis=-1) @ inv.T
    sj = src[..., 0] + cx
    si = src[..., 1] + cy

    if interpolation == "nearest":
        rj = np.round(sj).astype(np.int64)
        ri = np.round(si).astype(np.int64)
        inside = (ri >= 0) & (ri < h) & (rj >= 0) & (rj < w)
        rjc = np.clip(rj, 0, w - 1)
        ric = np.clip(ri, 0, h - 1)
        out = values[:, ric, rjc] * inside
        out_fg = fg[ric, rjc] & inside
        return out.astype(np.float32), out_fg
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")

    j0 = np.floor(sj).astype(np.int64)
    i0 = np.floor(si).astype(np.int64)
    fj = sj - j0
    fi = si - i0
    out = np.zeros((c, h, w), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    fg_f = fg.astype(np.float64)
    for di, dj, wgt in (
        (0, 0, (1 - fi) * (1 - fj)),
        (0, 1, (1 - fi) * fj),
        (1, 0, fi * (1 - fj)),
        (1, 1, fi * fj),
    ):
        iq = i0 + di
        jq = j0 + dj
        ok = (iq >= 0) & (iq < h) & (jq >= 0) & (jq < w)
        iqc = np.clip(iq, 0, h - 1)
        jqc = np.clip(jq, 0, w - 1)
        wv = wgt * ok
        out += values[:, iqc, jqc] * wv
        wsum += fg_f[iqc, jqc] * wv
    return out.astype(np.float32), wsum >= 0.5


def augment_structure(
    m: StructureMap,
    theta: float = 0.0,
    flip_ud: bool = False,
    flip_lr: bool = False,
    scale: float = 1.0,
    interpolation: str = "bilinear",
) -> StructureMap:
    """Spatially transform a normal map and rotate its vectors to match.

    Flips negate the corresponding normal component; rotation applies R(theta)
    to the (x,y) components; scaling leaves vectors untouched. Norms are
    preserved (bilinear samples are renormalized on the foreground).
    """
    if m.kind != "normal":
        raise StructureKindError(
            "vector-aware augmentation only applies to normal maps; "
            "use augment_spatial for other kinds"
        )
    if scale <= 0:
        raise ValueError("scale must be positive")
    inv = _affine_inverse(theta, flip_ud, flip_lr, scale)
    out, fg = _resample(m.values, m.foreground, inv, interpolation)

    vec = out.reshape(3, -1)
    sx = -1.0 if flip_lr else 1.0
    sy = -1.0 if flip_ud else 1.0
    c, s = math.cos(theta), math.sin(theta)
    x = sx * vec[0]
    y = sy * vec[1]
    vec = np.stack([c * x - s * y, s * x + c * y, vec[2]], axis=0)
    vec = vec.reshape(3, *out.shape[1:])

    if interpolation == "bilinear":
        norms = np.linalg.norm(vec, axis=0)
        good = fg & (norms > 1e-6)
        vec = np.where(good, vec / np.maximum(norms, 1e-12), 0.0)
        fg = good
    else:
        vec *= fg
    return StructureMap(values=vec.astype(np.float32), kind="normal", background_mask=~fg)


def augment_spatial(
    m: StructureMap,
    theta: float = 0.0,
    flip_ud: bool = False,
    flip_lr: bool = False,
    scale: float = 1.0,
    interpolation: str = "bilinear",
) -> StructureMap:
    """Plain spatial augmentation for depth and IUV maps."""
    inv = _affine_inverse(theta, flip_ud, flip_lr, scale)
    out, fg = _resample(m.values, m.foreground, inv, interpolation)
    out = out * fg
    return StructureMap(values=out.astype(np.float32), kind=m.kind, background_mask=~fg)


# ---------------------------------------------------------------------------
# Prior dataset
# ---------------------------------------------------------------------------

def item_rng(seed: int, index: int) -> np.random.Generator:
    """Splittable per-item stream: independent of how items are batched."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_prior_dataset(
    root: str | Path,
    count: int,
    seed: int,
    kind: str = "normal",
    image_size: int = 256,
) -> Path:
    """Render `count` structure maps into root/structures/<kind>/NNNNNN.png.

    Deterministic under (seed, count, kind, image_size); the manifest records
    the generation parameters and per-item pose/camera for coverage audits.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    outdir = root / "structures" / kind
    outdir.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(count):
        rng = item_rng(seed, i)
        hand = sample_hand(rng, image_size)
        m = render_structure(hand, kind, image_size)
        name = f"{i:06d}.png"
        pngio.save_structure_png(outdir / name, m.values, kind)
        rec = hand.to_record()
        rec["file"] = f"structures/{kind}/{name}"
        rec["index"] = i
        rec["flexed_digits"] = hand.flexed_digits()
        items.append(rec)
    manifest = {
        "seed": seed,
        "count": count,
        "kind": kind,
        "image_size": image_size,
        "items": items,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_structure(root: str | Path, index: int, kind: str = "normal") -> StructureMap:
    values = pngio.load_structure_png(
        Path(root) / "structures" / kind / f"{index:06d}.png", kind
    )
    if kind == "normal":
        fg = np.linalg.norm(values, axis=0) > 0.5
        values = np.where(fg, values, 0.0).astype(np.float32)
    elif kind == "depth":
        fg = values[0] > 1e-4
    else:
        fg = (values > 1e-4).any(axis=0)
    return StructureMap(values=values, kind=kind, background_mask=~fg)
