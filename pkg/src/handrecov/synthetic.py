"""Bundled synthetic dataset: shaded procedural hands over simple backdrops.

Each scene couples an appearance image with its ground-truth structure map,
hand mask, and projected keypoints, which is everything the training stages
and the acceptance checks need. Domain A images are bare scenes degraded
in-mask (markers/gloves stand-ins); domain B images are left bare.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .config import DegradeConfig, PipelineConfig
from .degrade import Keypoints2D, degrade, sample_spec
from .hand import sample_hand, skeleton_affinities
from .render import project_joints, render_structure_arrays
from .structure import StructureMap, item_rng


@dataclass
class Scene:
    image: np.ndarray          # (3,h,w) in [0,1]
    structure: StructureMap    # normal kind
    mask: np.ndarray           # (h,w) float {0,1}
    keypoints: Keypoints2D


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = np.clip(c0 + rng.uniform(-0.35, 0.35, size=3), 0.0, 1.0)
    axis = rng.integers(2)
    ramp = np.linspace(0.0, 1.0, h if axis == 0 else w)
    ramp = ramp[:, None] if axis == 0 else ramp[None, :]
    ramp = np.broadcast_to(ramp, (h, w))
    return (c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp).astype(np.float32)


def _skin_tone(rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(0.55, 0.9)
    g = r * rng.uniform(0.72, 0.85)
    b = g * rng.uniform(0.72, 0.88)
    return np.array([r, g, b], dtype=np.float32)


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells)).astype(np.float32)
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.floor(ys).astype(int); x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1); x1 = np.minimum(x0 + 1, cells - 1)
    fy = (ys - y0)[:, None]; fx = (xs - x0)[None, :]
    v = (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx) + grid[np.ix_(y0, x1)] * (1 - fy) * fx
         + grid[np.ix_(y1, x0)] * fy * (1 - fx) + grid[np.ix_(y1, x1)] * fy * fx)
    return v


def make_scene(seed: int, index: int, image_size: int) -> Scene:
    """Deterministic scene: Lambertian-shaded hand composited on a gradient."""
    rng = item_rng(seed, index)
    hand = sample_hand(rng, image_size)
    values, background, depth = render_structure_arrays(hand, "normal", image_size)
    fg = ~background

    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.0  # keep the light in front
    light /= np.linalg.norm(light)
    lambert = np.clip(np.einsum("chw,c->hw", values, light.astype(np.float32)), 0.0, 1.0)
    ambient = rng.uniform(0.25, 0.45)
    shade = ambient + (1.0 - ambient) * lambert
    tone = _skin_tone(rng)
    texture = 1.0 + 0.06 * _value_noise(rng, image_size, image_size)
    handpix = tone[:, None, None] * shade[None] * texture[None]

    img = _background(rng, image_size, image_size)
    img = np.where(fg[None], np.clip(handpix, 0.0, 1.0), img).astype(np.float32)

    joints, visible = project_joints(hand, depth, image_size)
    kp = Keypoints2D(joints=joints, visible=visible, affinities=skeleton_affinities())
    smap = StructureMap(values=values, kind="normal", background_mask=background)
    return Scene(image=img, structure=smap, mask=fg.astype(np.float32), keypoints=kp)


def save_keypoints(path: Path, kp: Keypoints2D) -> None:
    """Plain-text per-image joint list: `u v visible` rows."""
    lines = [f"{u:.3f} {v:.3f} {int(vis)}"
             for (u, v), vis in zip(kp.joints, kp.visible)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_keypoints(path: Path) -> Keypoints2D:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"bad keypoint row in {path}: {line!r}")
        rows.append((float(parts[0]), float(parts[1]), bool(int(parts[2]))))
    joints = np.array([(u, v) for u, v, _ in rows], dtype=np.float64)
    visible = np.array([vis for _, _, vis in rows], dtype=bool)
    return Keypoints2D(joints=joints, visible=visible, affinities=skeleton_affinities())


def write_scene(root: Path, stem: str, scene: Scene, with_structure: bool = True) -> None:
    pngio.save_image(root / "images" / f"{stem}.png", scene.image)
    pngio.save_mask(root / "masks" / f"{stem}.png", scene.mask)
    save_keypoints(root / "keypoints" / f"{stem}.txt", scene.keypoints)
    if with_structure:
        pngio.save_structure_png(
            root / "structures" / f"{stem}.png", scene.structure.values, "normal"
        )


def generate_domains(cfg: PipelineConfig) -> dict[str, int]:
    """Materialize the synthetic domain trees under the configured data root.

    B: bare scenes. A1: disjoint scenes degraded in-mask (marker-like spots
    and lines dominate). A2: occlusion-like region/whole degradations.
    pairs: scenes with ground-truth structure, half of them degraded, for
    supervised sketcher training. unlabeled: images only, for fine-tuning.
    """
    size = cfg.glob.image_size
    seed = cfg.seed
    n = cfg.data.synth_scenes
    counts = {}

    marker_cfg = DegradeConfig(
        spot_prob=0.9, line_prob=0.8, region_prob=0.25, whole_prob=0.05,
        radius_min=max(2, size // 40), radius_max=max(3, size // 12),
        width_min=max(1, size // 48), width_max=max(2, size // 20),
    )
    occl_cfg = DegradeConfig(
        spot_prob=0.1, line_prob=0.1, region_prob=0.95, whole_prob=0.3,
        radius_min=max(2, size // 40), radius_max=max(3, size // 12),
        width_min=max(1, size // 48), width_max=max(2, size // 20),
    )

    def build(tag: str, offset: int, count: int, degrade_cfg=None,
              with_structure=True):
        root = cfg.domain_root(tag)
        for i in range(count):
            scene = make_scene(seed, offset + i, size)
            if degrade_cfg is not None:
                spec = sample_spec(item_rng(seed + 17, offset + i), degrade_cfg,
                                   seed=offset + i)
                scene.image = degrade(scene.image, scene.mask, spec, scene.keypoints)
            write_scene(root, f"{offset + i:06d}", scene, with_structure)
        counts[tag] = count
        return root

    build("B", 0, n)
    build("A1", n, n, marker_cfg)
    build("A2", 2 * n, max(1, n // 2), occl_cfg)

    # Supervised pairs: half bare, half degraded, all with ground truth.
    root = cfg.domain_root("pairs")
    for i in range(n):
        idx = 3 * n + i
        scene = make_scene(seed, idx, size)
        if i % 2 == 1:
            spec = sample_spec(item_rng(seed + 29, idx), marker_cfg, seed=idx)
            scene.image = degrade(scene.image, scene.mask, spec, scene.keypoints)
        write_scene(root, f"{idx:06d}", scene, with_structure=True)
    counts["pairs"] = n

    # Unlabeled: images only (no structure written).
    root = cfg.domain_root("unlabeled")
    half = max(1, n // 2)
    for i in range(half):
        idx = 4 * n + i
        scene = make_scene(seed, idx, size)
        if i % 2 == 0:
            spec = sample_spec(item_rng(seed + 43, idx), marker_cfg, seed=idx)
            scene.image = degrade(scene.image, scene.mask, spec, scene.keypoints)
        pngio.save_image(root / "images" / f"{idx:06d}.png", scene.image)
    counts["unlabeled"] = half

    meta = {"seed": seed, "image_size": size, "counts": counts}
    Path(cfg.glob.data_root).mkdir(parents=True, exist_ok=True)
    (Path(cfg.glob.data_root) / "synth_meta.json").write_text(json.dumps(meta, indent=1))
    return counts
