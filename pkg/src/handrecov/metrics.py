"""FID / KID over masked-background feature sets.

Backgrounds are zeroed with the binarized hand mask before extraction, so
the distances compare hand regions only. Extractors are pluggable: the
builtin one is the toolkit's own frozen ViT class token and always works;
the ViT-base and CNN extractors need external weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import ParameterError
from .vit import ViTBackbone

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


class DependencyError(RuntimeError):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (N,D) float64
    extractor_id: str
    mask_filtered: bool

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("feature set must be (N,D)")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature set contains non-finite values")


class BuiltinExtractor(nn.Module):
    """Class token of the toolkit's frozen backbone."""

    extractor_id = "builtin"

    def __init__(self, backbone: ViTBackbone):
        super().__init__()
        self.backbone = backbone.freeze()
        self.feature_dim = backbone.width

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _, cls = self.backbone(images)
        return cls


class ViTFeatureExtractor(nn.Module):
    """ViT-class extractor: base-width class token (dim 768)."""

    extractor_id = "vit"

    def __init__(self, image_size: int):
        super().__init__()
        self.net = ViTBackbone(image_size, image_size // 16, width=768,
                               depth=12, heads=12)
        self.feature_dim = 768

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _, cls = self.net(images)
        return cls


class CNNFeatureExtractor(nn.Module):
    """CNN extractor: final pooled conv features (dim 2048)."""

    extractor_id = "cnn"

    def __init__(self, image_size: int):
        super().__init__()
        chans = [64, 192, 512, 1024, 2048]
        layers = []
        cin = 3
        for c in chans:
            layers += [nn.Conv2d(cin, c, 3, stride=2, padding=1),
                       nn.ReLU(inplace=True),
                       nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True)]
            cin = c
        self.trunk = nn.Sequential(*layers)
        self.feature_dim = 2048

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.trunk(images).mean(dim=(2, 3))


def get_extractor(name: str, image_size: int, backbone: ViTBackbone | None = None,
                  weights_path: str = ""):
    """Resolve an extractor by name. vit/cnn need a weights file; callers may
    catch DependencyError and fall back to the builtin extractor."""
    if name == "builtin":
        if backbone is None:
            raise DependencyError("builtin extractor needs the frozen backbone")
        return BuiltinExtractor(backbone)
    if name in ("vit", "cnn"):
        net = (ViTFeatureExtractor if name == "vit" else CNNFeatureExtractor)(image_size)
        if not weights_path:
            raise DependencyError(
                f"extractor {name!r} requires pretrained weights (none configured)"
            )
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as e:
            raise DependencyError(f"cannot load {name} weights: {e}") from e
        net.load_state_dict(state)
        return net.eval()
    raise ParameterError(f"unknown extractor {name!r}")


def extract_features(
    images: np.ndarray,
    masks: np.ndarray | None,
    extractor,
    batch_size: int = 32,
) -> FeatureSet:
    """images (N,3,h,w) in [0,1]; masks (N,h,w) or None. Background pixels
    are zeroed (mask binarized at 0.5) before extraction."""
    if masks is not None and masks.shape[0] != images.shape[0]:
        raise ValueError("masks must align with images")
    feats = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            batch = torch.from_numpy(images[i:i + batch_size].astype(np.float32))
            if masks is not None:
                m = torch.from_numpy(
                    (masks[i:i + batch_size] >= MASK_THRESHOLD).astype(np.float32)
                )
                batch = batch * m[:, None]
            feats.append(extractor(batch).double().numpy())
    return FeatureSet(
        vectors=np.concatenate(feats, axis=0),
        extractor_id=getattr(extractor, "extractor_id", "custom"),
        mask_filtered=masks is not None,
    )


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_stats(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = vectors.mean(axis=0)
    sigma = np.cov(vectors, rowvar=False)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1, 1)
    return mu, sigma


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError("feature dimensions differ")
    if a.vectors.shape[0] < 2 or b.vectors.shape[0] < 2:
        raise ValueError("FID needs at least 2 vectors per set")
    d = a.vectors.shape[1]
    if min(a.vectors.shape[0], b.vectors.shape[0]) < d:
        logger.warning("FID with N < D (%d < %d): covariance is rank-deficient",
                       min(a.vectors.shape[0], b.vectors.shape[0]), d)
    mu_a, sig_a = _gaussian_stats(a.vectors)
    mu_b, sig_b = _gaussian_stats(b.vectors)
    for name, sig in (("a", sig_a), ("b", sig_b)):
        eigmin = np.linalg.eigvalsh((sig + sig.T) / 2.0).min()
        if eigmin < 1e-10 * max(np.trace(sig), 1e-30):
            jitter = 1e-6 * max(np.trace(sig) / d, 1e-12)
            logger.info("regularizing near-singular covariance %s with jitter %.3g",
                        name, jitter)
            sig += jitter * np.eye(d)
    root_a = _psd_sqrt(sig_a)
    cross = _psd_sqrt(root_a @ sig_b @ root_a)
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(sig_a) + np.trace(sig_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# KID
# ---------------------------------------------------------------------------

def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _unbiased_mmd2(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid(
    a: FeatureSet,
    b: FeatureSet,
    subset_size: int | None = None,
    n_subsets: int = 100,
    seed: int = 0,
    scale_100: bool = False,
) -> tuple[float, float]:
    """Unbiased polynomial-kernel MMD^2 averaged over random subsets.

    subset_size None means the default 1000 clamped to the smaller set; an
    explicit size larger than either set is an error. Returns (mean, std
    across subsets); scale_100 applies the x100 display convention used with
    the CNN extractor.
    """
    n_a, n_b = a.vectors.shape[0], b.vectors.shape[0]
    if subset_size is None:
        size = min(1000, n_a, n_b)
    else:
        if subset_size > min(n_a, n_b):
            raise ParameterError(
                f"subset size {subset_size} exceeds a set ({n_a}, {n_b})"
            )
        size = subset_size
    if size < 2:
        raise ParameterError("KID subsets need at least 2 vectors")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(n_a, size=size, replace=False)
        ib = rng.choice(n_b, size=size, replace=False)
        vals.append(_unbiased_mmd2(a.vectors[ia], b.vectors[ib]))
    scale = 100.0 if scale_100 else 1.0
    return scale * float(np.mean(vals)), scale * float(np.std(vals))
