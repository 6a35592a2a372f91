"""PNG storage for images, masks, and structure maps.

Structure maps go to 16-bit PNGs: normals through the affine [-1,1] ->
[0,65535], depth scaled by a fixed constant recorded here, IUV through
[0,1] -> [0,65535]. The quantize/dequantize pair is stable: re-saving a
loaded map reproduces the file byte-for-byte.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

DEPTH_SCALE = 8.0  # scene units mapped to the full uint16 range


class PngError(IOError):
    pass


def _imwrite(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), arr):
        raise PngError(f"failed to write {path}")


def save_image(path: str | Path, image: np.ndarray) -> None:
    """image: float (3,h,w) in [0,1] -> 8-bit RGB PNG."""
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _imwrite(path, cv2.cvtColor(rgb.transpose(1, 2, 0), cv2.COLOR_RGB2BGR))


def load_image(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise PngError(f"cannot decode image {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return rgb.transpose(2, 0, 1).astype(np.float32) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """mask: float (h,w) in [0,1] -> 8-bit grayscale PNG."""
    _imwrite(path, np.round(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8))


def load_mask(path: str | Path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise PngError(f"cannot decode mask {path}")
    return m.astype(np.float32) / 255.0


def _quantize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = (values.astype(np.float64) - lo) / (hi - lo)
    return np.round(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _dequantize(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = raw.astype(np.float64) / 65535.0
    return (x * (hi - lo) + lo).astype(np.float32)


def save_structure_png(path: str | Path, values: np.ndarray, kind: str) -> None:
    """values: (c,h,w) float; kind decides the affine range.

    normal: 3 channels in [-1,1]; depth: 1 channel in [0,DEPTH_SCALE];
    iuv: 2 channels in [0,1] padded with a zero third channel on disk.
    """
    if kind == "normal":
        raw = _quantize(values, -1.0, 1.0)  # (3,h,w)
        _imwrite(path, raw.transpose(1, 2, 0)[..., ::-1])  # RGB->BGR
    elif kind == "depth":
        _imwrite(path, _quantize(values[0], 0.0, DEPTH_SCALE))
    elif kind == "iuv":
        pad = np.concatenate([values, np.zeros_like(values[:1])], axis=0)
        raw = _quantize(pad, 0.0, 1.0)
        _imwrite(path, raw.transpose(1, 2, 0)[..., ::-1])
    else:
        raise PngError(f"unknown structure kind {kind!r}")


def load_structure_png(path: str | Path, kind: str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise PngError(f"cannot decode structure map {path}")
    if kind == "normal":
        if raw.ndim != 3 or raw.dtype != np.uint16:
            raise PngError(f"{path} is not a 16-bit 3-channel normal map")
        return _dequantize(raw[..., ::-1].transpose(2, 0, 1), -1.0, 1.0)
    if kind == "depth":
        if raw.ndim != 2 or raw.dtype != np.uint16:
            raise PngError(f"{path} is not a 16-bit depth map")
        return _dequantize(raw, 0.0, DEPTH_SCALE)[None]
    if kind == "iuv":
        return _dequantize(raw[..., ::-1].transpose(2, 0, 1)[:2], 0.0, 1.0)
    raise PngError(f"unknown structure kind {kind!r}")
