import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handrecov import pngio
from handrecov.hand import Camera, ProceduralHand, rot_z, sample_hand
from handrecov.render import render_structure_arrays
from handrecov.structure import (StructureKindError, StructureMap,
                                 augment_spatial, augment_structure,
                                 generate_prior_dataset, load_structure,
                                 render_structure, to_image_range)
from conftest import make_unit_normal_map


def sphere_hand(size=65):
    # Palm ellipsoid as a sphere on the optical axis; fingers shrunk away
    # behind it so only the sphere is visible. cx=cy=size/2 puts pixel
    # (size//2, size//2) exactly on axis for odd sizes... use explicit half.
    angles = {f: (0.0, 0.0, 0.0, 0.0) for f in
              ("thumb", "index", "middle", "ring", "pinky")}
    lengths = {f: (0.01, 0.01, 0.01) for f in angles}
    radii = {f: (0.004, 0.004, 0.004) for f in angles}
    cam = Camera(focal=1.0 * size, cx=size / 2 + 0.5, cy=size / 2 + 0.5,
                 rotation=np.eye(3), translation=np.array([0.0, 0.0, -2.5]))
    return ProceduralHand(joint_angles=angles, segment_lengths=lengths,
                          segment_radii=radii, palm_size=(0.6, 0.6, 0.6),
                          camera=cam)


def test_sphere_center_normal_faces_camera():
    size = 64
    hand = sphere_hand(size)
    m = render_structure(hand, "normal", size)
    center = m.values[:, size // 2, size // 2]
    assert np.allclose(center, [0.0, 0.0, 1.0], atol=1e-3)


def test_foreground_normals_unit_length(toy_hand):
    m = render_structure(toy_hand, "normal", 64)
    norms = np.linalg.norm(m.values, axis=0)
    assert np.abs(norms[m.foreground] - 1.0).max() <= 1e-3
    assert (norms[m.background_mask] == 0).all()
    m.check_invariants()


def _ray_march_depth(hand, direction, t_max=6.0):
    """Independent oracle: march the ray against capsule/ellipsoid SDFs."""
    from handrecov.hand import capsules

    cam = hand.camera
    prims = []
    for a, b, r in capsules(hand):
        prims.append(("c", cam.to_camera(a[None])[0], cam.to_camera(b[None])[0], r))
    palm_c = cam.to_camera(np.zeros((1, 3)))[0]

    def sdf(p):
        best = np.inf
        for kind, a, b, r in prims:
            u = b - a
            L = np.linalg.norm(u)
            u = u / L
            s = np.clip((p - a) @ u, 0, L)
            best = min(best, np.linalg.norm(p - (a + s * u)) - r)
        # ellipsoid distance approximation via scaled space (good enough for
        # marching; refined by bisection below)
        local = (p - palm_c) @ cam.rotation
        k = np.linalg.norm(local / np.asarray(hand.palm_size))
        scale = min(hand.palm_size)
        best = min(best, (k - 1.0) * scale)
        return best

    t = 0.02
    prev = t
    while t < t_max:
        d = sdf(direction * t)
        if d < 1e-4:
            lo, hi = prev, t
            for _ in range(60):
                mid = (lo + hi) / 2
                if sdf(direction * mid) < 0:
                    hi = mid
                else:
                    lo = mid
            return (lo + hi) / 2
        prev = t
        t += max(d * 0.9, 1e-3)
    return 0.0


def test_depth_matches_ray_march_oracle(toy_hand):
    size = 64
    values, background, depth = render_structure_arrays(toy_hand, "depth", size)
    cam = toy_hand.camera
    rng = np.random.default_rng(0)
    count = 0
    for _ in range(200):
        i = int(rng.integers(8, size - 8))
        j = int(rng.integers(8, size - 8))
        if background[i, j]:
            continue
        x = (j + 0.5 - cam.cx) / cam.focal
        y = (cam.cy - (i + 0.5)) / cam.focal
        d = np.array([x, y, -1.0])
        d /= np.linalg.norm(d)
        t_oracle = _ray_march_depth(toy_hand, d)
        assert t_oracle > 0, "oracle missed a rendered hit"
        assert abs(t_oracle - depth[i, j]) < 5e-3
        count += 1
        if count >= 16:
            break
    assert count >= 16


def test_depth_min_over_overlapping_segments(toy_hand):
    # z-buffer picks the nearest primitive: overall depth <= each
    # single-primitive render's depth wherever both hit
    size = 48
    _, bg_all, depth_all = render_structure_arrays(toy_hand, "depth", size)
    assert (depth_all[~bg_all] > 0).all()
    assert depth_all.min() >= 0


def test_iuv_range(toy_hand):
    m = render_structure(toy_hand, "iuv", 64)
    assert m.values.shape[0] == 2
    assert m.values.min() >= 0 and m.values.max() <= 1
    m.check_invariants()


def test_empty_render_warns():
    hand = sphere_hand(64)
    hand.camera = Camera(focal=64.0, cx=32, cy=32, rotation=np.eye(3),
                         translation=np.array([50.0, 50.0, -2.5]))
    with pytest.warns(RuntimeWarning, match="out of frame"):
        m = render_structure(hand, "normal", 64)
    assert m.background_mask.all()


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _map_from_arrays(rng, size=32):
    vec, fg = make_unit_normal_map(rng, size)
    return StructureMap(values=vec, kind="normal", background_mask=~fg)


def test_augment_identity(rng):
    m = _map_from_arrays(rng)
    out = augment_structure(m, theta=0.0, interpolation="nearest")
    assert np.array_equal(out.values, m.values)


def test_augment_rotation_pi_flips_xy(rng):
    m = _map_from_arrays(rng)
    out = augment_structure(m, theta=math.pi, interpolation="nearest")
    # R(pi) both rotates the grid 180 degrees and negates (x,y) of normals
    rot = m.values[:, ::-1, ::-1].copy()
    rot[0] *= -1
    rot[1] *= -1
    both = out.foreground & ~np.asarray(rot == 0).all(axis=0)
    assert np.abs(out.values[:, both] - rot[:, both]).max() <= 1e-5


def test_augment_flip_ud_negates_y(rng):
    m = _map_from_arrays(rng)
    out = augment_structure(m, flip_ud=True, interpolation="nearest")
    expected = m.values[:, ::-1, :].copy()
    expected[1] *= -1
    assert np.abs(out.values - expected).max() <= 1e-6
    norms = np.linalg.norm(out.values, axis=0)
    assert np.abs(norms[out.foreground] - 1.0).max() <= 1e-3


def test_augment_flip_lr_negates_x(rng):
    m = _map_from_arrays(rng)
    out = augment_structure(m, flip_lr=True, interpolation="nearest")
    expected = m.values[:, :, ::-1].copy()
    expected[0] *= -1
    assert np.abs(out.values - expected).max() <= 1e-6


def test_double_flip_identity(rng):
    m = _map_from_arrays(rng)
    once = augment_structure(m, flip_ud=True, flip_lr=True, interpolation="nearest")
    twice = augment_structure(once, flip_ud=True, flip_lr=True, interpolation="nearest")
    assert np.abs(twice.values - m.values).max() <= 1e-5


def test_quarter_turns_nearest_are_exact_permutations(rng):
    m = _map_from_arrays(rng)
    out = augment_structure(m, theta=math.pi / 2, interpolation="nearest")
    back = augment_structure(out, theta=-math.pi / 2, interpolation="nearest")
    assert np.abs(back.values - m.values).max() <= 1e-5


@settings(max_examples=20, deadline=None)
@given(theta=st.floats(-math.pi, math.pi), flip_ud=st.booleans(),
       flip_lr=st.booleans(), scale=st.floats(0.6, 1.4))
def test_norm_conservation_property(theta, flip_ud, flip_lr, scale):
    rng = np.random.default_rng(7)
    m = _map_from_arrays(rng)
    out = augment_structure(m, theta, flip_ud, flip_lr, scale)
    if out.foreground.any():
        norms = np.linalg.norm(out.values, axis=0)
        assert np.abs(norms[out.foreground] - 1.0).max() <= 1e-3
        assert (norms[out.background_mask] < 1e-6).all()


def test_augment_rejects_non_normal_kind():
    depth = StructureMap(values=np.ones((1, 16, 16), np.float32), kind="depth",
                         background_mask=np.zeros((16, 16), bool))
    with pytest.raises(StructureKindError):
        augment_structure(depth, theta=0.3)
    out = augment_spatial(depth, theta=0.3)  # plain path accepts other kinds
    assert out.kind == "depth"


def test_render_rotation_consistency_single_pose():
    rng = np.random.default_rng(11)
    hand = sample_hand(rng, 128)
    theta = 0.8
    m0 = render_structure(hand, "normal", 128)
    Rz = rot_z(theta)
    hand_rot = ProceduralHand(
        joint_angles=hand.joint_angles, segment_lengths=hand.segment_lengths,
        segment_radii=hand.segment_radii, palm_size=hand.palm_size,
        camera=Camera(focal=hand.camera.focal, cx=hand.camera.cx, cy=hand.camera.cy,
                      rotation=Rz @ hand.camera.rotation,
                      translation=Rz @ hand.camera.translation))
    m_rot = render_structure(hand_rot, "normal", 128)
    m_aug = augment_structure(m0, theta=theta)
    both = m_rot.foreground & m_aug.foreground
    diff = np.abs(m_rot.values - m_aug.values).max(axis=0) / 2.0
    # coarse check here; the acceptance suite applies the aliasing exclusion
    assert (diff[both] <= 2 / 255).mean() > 0.7


# ---------------------------------------------------------------------------
# Storage and dataset generation
# ---------------------------------------------------------------------------

def test_structure_png_round_trip_bit_exact(tmp_path, rng):
    vec, fg = make_unit_normal_map(rng, 32)
    p1 = tmp_path / "a.png"
    p2 = tmp_path / "b.png"
    pngio.save_structure_png(p1, vec, "normal")
    loaded = pngio.load_structure_png(p1, "normal")
    pngio.save_structure_png(p2, loaded, "normal")
    assert p1.read_bytes() == p2.read_bytes()
    assert np.abs(loaded - vec).max() <= 2.0 / 65535


def test_generate_prior_dataset_deterministic(tmp_path):
    r1 = generate_prior_dataset(tmp_path / "d1", count=3, seed=9, image_size=32)
    r2 = generate_prior_dataset(tmp_path / "d2", count=3, seed=9, image_size=32)
    for i in range(3):
        a = (r1 / "structures" / "normal" / f"{i:06d}.png").read_bytes()
        b = (r2 / "structures" / "normal" / f"{i:06d}.png").read_bytes()
        assert a == b
    manifest = json.loads((r1 / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["count"] == 3
    assert len(manifest["items"]) == 3


def test_generate_prior_dataset_cardinality_and_load(tmp_path):
    root = generate_prior_dataset(tmp_path / "ds", count=5, seed=1, image_size=32)
    files = list((root / "structures" / "normal").glob("*.png"))
    assert len(files) == 5
    m = load_structure(root, 2)
    m.check_invariants()


def test_pose_coverage(tmp_path):
    root = generate_prior_dataset(tmp_path / "ds", count=120, seed=5, image_size=32)
    manifest = json.loads((root / "manifest.json").read_text())
    frac = np.mean([item["flexed_digits"] >= 3 for item in manifest["items"]])
    assert 0.2 <= frac <= 0.8


def test_prior_dataset_rejects_zero_count(tmp_path):
    with pytest.raises(ValueError):
        generate_prior_dataset(tmp_path / "z", count=0, seed=0)


def test_to_image_range_affine(rng):
    m = _map_from_arrays(rng)
    img = to_image_range(m)
    assert img.shape[0] == 3
    assert np.allclose(img, (m.values + 1) / 2, atol=1e-6)
