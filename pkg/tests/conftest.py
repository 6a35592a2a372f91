import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_unit_normal_map(rng, size=32, fg_fraction=0.3):
    """Random valid normal-kind map: unit vectors on a disc, zeros outside."""
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    r = size * np.sqrt(fg_fraction / np.pi)
    fg = (jj - size / 2) ** 2 + (ii - size / 2) ** 2 <= r * r
    vec = rng.normal(size=(3, size, size))
    vec[2] = np.abs(vec[2]) + 0.5
    vec /= np.linalg.norm(vec, axis=0, keepdims=True)
    vec = (vec * fg).astype(np.float32)
    return vec, fg


@pytest.fixture
def toy_hand():
    from handrecov.hand import Camera, ProceduralHand

    angles = {f: (0.0, 0.2, 0.2, 0.2) for f in
              ("thumb", "index", "middle", "ring", "pinky")}
    lengths = {f: (0.3, 0.22, 0.16) for f in angles}
    radii = {f: (0.07, 0.065, 0.055) for f in angles}
    cam = Camera(focal=1.05 * 64, cx=32.0, cy=32.0,
                 rotation=np.eye(3), translation=np.array([0.0, 0.0, -2.7]))
    return ProceduralHand(joint_angles=angles, segment_lengths=lengths,
                          segment_radii=radii, camera=cam)
