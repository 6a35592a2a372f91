"""Partner-domain construction: hand-specific synthetic degradations.

Bare images become their degraded partners by compositing noise into the
binarized hand mask only: spots at visible joints, lines along visible
joint affinities, random polygons, or the whole hand region, each blended
with a random weight. Pixels outside the mask are returned bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .config import DegradeConfig

KINDS = ("spot", "line", "region", "whole")
MASK_THRESHOLD = 0.5


@dataclass
class Keypoints2D:
    joints: np.ndarray      # (k,2) float, (col,row) pixel coords
    visible: np.ndarray     # (k,) bool
    affinities: list[tuple[int, int]]

    def visible_pairs(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b in self.affinities
                if self.visible[a] and self.visible[b]]


@dataclass
class DegradationSpec:
    kinds: tuple[str, ...]
    counts: dict[str, int]
    blend_range: tuple[float, float]
    radius_range: tuple[int, int]
    width_range: tuple[int, int]
    grayscale_prob: float
    seed: int

    def __post_init__(self):
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown degradation kind {k!r}")
        if not self.kinds:
            raise ValueError("spec must request at least one kind")
        if any(self.counts.get(k, 0) < 0 for k in self.kinds):
            raise ValueError("counts must be nonnegative")
        lo, hi = self.blend_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("blend weights must lie in [0,1]")

    def to_json(self) -> str:
        return json.dumps({
            "kinds": list(self.kinds), "counts": self.counts,
            "blend_range": list(self.blend_range),
            "radius_range": list(self.radius_range),
            "width_range": list(self.width_range),
            "grayscale_prob": self.grayscale_prob, "seed": self.seed,
        })


def sample_spec(rng: np.random.Generator, cfg: DegradeConfig, seed: int) -> DegradationSpec:
    """Draw one recipe. Kinds are included independently; an empty draw is
    rejected and resampled, so inclusion frequencies follow the conditional
    law p_k / (1 - prod_j (1 - p_j))."""
    probs = {"spot": cfg.spot_prob, "line": cfg.line_prob,
             "region": cfg.region_prob, "whole": cfg.whole_prob}
    while True:
        kinds = tuple(k for k in KINDS if rng.uniform() < probs[k])
        if kinds:
            break
    counts = {
        "spot": int(rng.integers(1, cfg.max_spots + 1)),
        "line": int(rng.integers(1, cfg.max_lines + 1)),
        "region": int(rng.integers(1, cfg.max_regions + 1)),
        "whole": 1,
    }
    return DegradationSpec(
        kinds=kinds,
        counts={k: counts[k] for k in kinds},
        blend_range=(cfg.blend_min, cfg.blend_max),
        radius_range=(cfg.radius_min, cfg.radius_max),
        width_range=(cfg.width_min, cfg.width_max),
        grayscale_prob=cfg.grayscale_prob,
        seed=seed,
    )


def _random_color(rng: np.random.Generator, grayscale_prob: float) -> np.ndarray:
    if rng.uniform() < grayscale_prob:
        v = rng.uniform(0.0, 1.0)
        return np.array([v, v, v], dtype=np.float32)
    return rng.uniform(0.0, 1.0, size=3).astype(np.float32)


def _disc_footprint(h: int, w: int, center: tuple[float, float], r: float) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return (jj - center[0]) ** 2 + (ii - center[1]) ** 2 <= r * r


def _segment_footprint(h, w, p0, p1, width) -> np.ndarray:
    """Pixels whose center lies within width/2 of the segment p0-p1."""
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d = np.array(p1, dtype=np.float64) - np.array(p0, dtype=np.float64)
    len2 = d @ d
    vx = jj - p0[0]
    vy = ii - p0[1]
    if len2 < 1e-12:
        dist2 = vx * vx + vy * vy
    else:
        t = np.clip((vx * d[0] + vy * d[1]) / len2, 0.0, 1.0)
        dist2 = (vx - t * d[0]) ** 2 + (vy - t * d[1]) ** 2
    return dist2 <= (width / 2.0) ** 2


def _polygon_footprint(h, w, rng: np.random.Generator, mask_bin: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask_bin)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    n = int(rng.integers(3, 9))
    verts = np.stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)], axis=1)
    canvas = np.zeros((h, w), dtype=np.uint8)
    cv2.fillPoly(canvas, [np.round(verts).astype(np.int32)], 1)
    return canvas.astype(bool)


def degrade(
    x_b: np.ndarray,
    mask: np.ndarray,
    spec: DegradationSpec,
    kp: Keypoints2D | None,
) -> np.ndarray:
    """Apply spec to image (3,h,w); degradations land inside the binarized
    mask only, outside pixels are bit-identical to the input."""
    if x_b.ndim != 3 or x_b.shape[0] != 3:
        raise ValueError(f"expected (3,h,w) image, got {x_b.shape}")
    if mask.shape != x_b.shape[1:]:
        raise ValueError("mask spatial dims must match the image")
    h, w = mask.shape
    mask_bin = mask >= MASK_THRESHOLD
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))

    degraded = x_b.copy()
    if not mask_bin.any():
        return degraded

    joint_kinds = [k for k in spec.kinds if k in ("spot", "line")]
    if joint_kinds and (kp is None or not kp.visible.any()):
        warnings.warn(
            f"no visible joints: skipping {joint_kinds}", RuntimeWarning
        )

    for kind in spec.kinds:
        for _ in range(spec.counts.get(kind, 0)):
            if kind == "spot":
                if kp is None or not kp.visible.any():
                    continue
                vis_idx = np.nonzero(kp.visible)[0]
                j = int(rng.choice(vis_idx))
                r = rng.uniform(spec.radius_range[0], spec.radius_range[1])
                fp = _disc_footprint(h, w, tuple(kp.joints[j]), r)
            elif kind == "line":
                if kp is None:
                    continue
                pairs = kp.visible_pairs()
                if not pairs:
                    continue
                a, b = pairs[int(rng.integers(len(pairs)))]
                width = rng.uniform(spec.width_range[0], spec.width_range[1])
                fp = _segment_footprint(h, w, kp.joints[a], kp.joints[b], width)
            elif kind == "region":
                fp = _polygon_footprint(h, w, rng, mask_bin)
            else:  # whole
                fp = np.ones((h, w), dtype=bool)
            fp = fp & mask_bin
            if not fp.any():
                continue
            color = _random_color(rng, spec.grayscale_prob)
            alpha = rng.uniform(*spec.blend_range)
            degraded[:, fp] = (1.0 - alpha) * degraded[:, fp] + alpha * color[:, None]

    out = x_b.copy()
    out[:, mask_bin] = np.clip(degraded[:, mask_bin], 0.0, 1.0)
    return out


def make_partner_batch(
    batch: list[tuple[np.ndarray, np.ndarray, Keypoints2D | None]],
    cfg: DegradeConfig,
    seed: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Degrade a batch of (image, mask, keypoints) into (degraded, clean)
    pairs, one independently sampled spec per item."""
    out = []
    for i, (img, mask, kp) in enumerate(batch):
        item_seed = int(np.random.default_rng(
            np.random.SeedSequence([seed, i])).integers(0, 2**31 - 1))
        spec = sample_spec(
            np.random.default_rng(np.random.SeedSequence([seed, i, 1])), cfg, item_seed
        )
        out.append((degrade(img, mask, spec, kp), img))
    return out
