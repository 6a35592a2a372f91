"""Procedural articulated hand: 5 capsule chains and a palm ellipsoid.

Stands in for scanned/parametric meshes as the source of the bare structure
prior: articulated, self-occluding, smooth. The skeleton exposes 21 joints
(wrist + 4 per digit) with chain adjacencies as affinities, so projected
keypoints feed the joint-anchored degradations directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
FLEX_LIMITS = (0.0, 1.5)       # per-articulation flexion, radians
ABDUCT_LIMITS = (-0.28, 0.28)  # spread at the base joint, radians
FLEXED_DIGIT_THRESHOLD = 1.2   # summed flexion above this counts as a flexed digit


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    rotation: np.ndarray   # hand frame -> camera frame (3,3)
    translation: np.ndarray  # hand origin in camera frame (3,)

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


@dataclass
class ProceduralHand:
    """Joint angles in radians, segment geometry in scene units.

    joint_angles[finger] = (abduct, flex_base, flex_mid, flex_tip).
    """

    joint_angles: dict[str, tuple[float, float, float, float]]
    segment_lengths: dict[str, tuple[float, float, float]]
    segment_radii: dict[str, tuple[float, float, float]]
    palm_size: tuple[float, float, float] = (0.42, 0.52, 0.16)
    camera: Camera | None = None

    def __post_init__(self):
        for f, (ab, *flex) in self.joint_angles.items():
            if not (ABDUCT_LIMITS[0] - 1e-9 <= ab <= ABDUCT_LIMITS[1] + 1e-9):
                raise ValueError(f"{f}: abduction {ab} outside limits")
            for a in flex:
                if not (FLEX_LIMITS[0] - 1e-9 <= a <= FLEX_LIMITS[1] + 1e-9):
                    raise ValueError(f"{f}: flexion {a} outside limits")
        for f in FINGERS:
            if any(v <= 0 for v in self.segment_lengths[f]):
                raise ValueError(f"{f}: segment lengths must be positive")
            if any(v <= 0 for v in self.segment_radii[f]):
                raise ValueError(f"{f}: segment radii must be positive")

    def flexed_digits(self) -> int:
        return sum(
            1 for f in FINGERS
            if sum(self.joint_angles[f][1:]) > FLEXED_DIGIT_THRESHOLD
        )

    def to_record(self) -> dict:
        return {
            "joint_angles": {k: list(v) for k, v in self.joint_angles.items()},
            "segment_lengths": {k: list(v) for k, v in self.segment_lengths.items()},
            "segment_radii": {k: list(v) for k, v in self.segment_radii.items()},
            "palm_size": list(self.palm_size),
            "camera": None if self.camera is None else {
                "focal": self.camera.focal,
                "cx": self.camera.cx,
                "cy": self.camera.cy,
                "rotation": self.camera.rotation.tolist(),
                "translation": self.camera.translation.tolist(),
            },
        }


# Finger bases on the distal palm edge, hand frame: x lateral (thumb side
# negative), y distal (toward fingertips), z out of the back of the hand.
_BASES = {
    "thumb": np.array([-0.40, -0.12, 0.0]),
    "index": np.array([-0.26, 0.46, 0.0]),
    "middle": np.array([-0.09, 0.50, 0.0]),
    "ring": np.array([0.09, 0.48, 0.0]),
    "pinky": np.array([0.27, 0.42, 0.0]),
}
_BASE_DIRS = {
    "thumb": np.array([-0.80, 0.55, 0.24]),
    "index": np.array([-0.06, 1.0, 0.0]),
    "middle": np.array([0.0, 1.0, 0.0]),
    "ring": np.array([0.06, 1.0, 0.0]),
    "pinky": np.array([0.13, 1.0, 0.0]),
}


def finger_chain(hand: ProceduralHand, finger: str) -> list[np.ndarray]:
    """Joint positions of one digit in the hand frame: base + 3 more."""
    ab, f0, f1, f2 = hand.joint_angles[finger]
    d = _BASE_DIRS[finger] / np.linalg.norm(_BASE_DIRS[finger])
    # Flexion curls toward the palm (-z); its axis is perpendicular to the
    # digit direction, lying in the palm plane.
    axis = np.cross(np.array([0.0, 0.0, 1.0]), d)
    axis /= np.linalg.norm(axis)
    d = _axis_rot(np.array([0.0, 0.0, 1.0]), ab) @ d
    axis = _axis_rot(np.array([0.0, 0.0, 1.0]), ab) @ axis
    pts = [_BASES[finger].copy()]
    for k, flex in enumerate((f0, f1, f2)):
        d = _axis_rot(axis, -flex) @ d
        pts.append(pts[-1] + hand.segment_lengths[finger][k] * d)
    return pts


def _axis_rot(axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues formula.
    a = axis / np.linalg.norm(axis)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def skeleton_joints(hand: ProceduralHand) -> np.ndarray:
    """(21,3) hand-frame joints: wrist, then 4 per digit in FINGERS order."""
    wrist = np.array([0.0, -0.5, 0.0])
    joints = [wrist]
    for f in FINGERS:
        joints.extend(finger_chain(hand, f))
    return np.stack(joints)


def skeleton_affinities() -> list[tuple[int, int]]:
    """Edges between adjacent joints: wrist->base and along each chain."""
    edges = []
    for fi in range(len(FINGERS)):
        base = 1 + 4 * fi
        edges.append((0, base))
        for k in range(3):
            edges.append((base + k, base + k + 1))
    return edges


def capsules(hand: ProceduralHand) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """All capsule segments (a, b, radius) in the hand frame."""
    out = []
    for f in FINGERS:
        pts = finger_chain(hand, f)
        for k in range(3):
            out.append((pts[k], pts[k + 1], hand.segment_radii[f][k]))
    # Wrist stub keeps the silhouette from ending abruptly at the palm.
    out.append((np.array([0.0, -0.55, 0.0]), np.array([0.0, -0.25, 0.0]), 0.20))
    return out


def sample_pose(rng: np.random.Generator) -> dict[str, tuple[float, float, float, float]]:
    """Mixture pose sampler: each digit is either extended or curled.

    Keeps the archive diverse (open hands, fists, pointing) instead of the
    near-certain all-curled poses a uniform draw over the limits would give.
    """
    angles = {}
    for f in FINGERS:
        ab = float(rng.uniform(*ABDUCT_LIMITS))
        if rng.uniform() < 0.5:
            flex = rng.uniform(0.0, 0.35, size=3)
        else:
            flex = rng.uniform(0.45, FLEX_LIMITS[1], size=3)
        angles[f] = (ab, float(flex[0]), float(flex[1]), float(flex[2]))
    return angles


def sample_camera(rng: np.random.Generator, image_size: int) -> Camera:
    # Random orientation via normalized quaternion.
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    dist = rng.uniform(2.3, 3.1)
    jitter = rng.uniform(-0.18, 0.18, size=2)
    t = np.array([jitter[0], jitter[1], -dist])
    return Camera(
        focal=1.05 * image_size,
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        rotation=R,
        translation=t,
    )


def sample_hand(rng: np.random.Generator, image_size: int) -> ProceduralHand:
    lengths, radii = {}, {}
    base_len = {"thumb": 0.30, "index": 0.34, "middle": 0.38, "ring": 0.34, "pinky": 0.26}
    base_rad = {"thumb": 0.085, "index": 0.072, "middle": 0.075, "ring": 0.070, "pinky": 0.060}
    for f in FINGERS:
        s = rng.uniform(0.88, 1.12)
        lengths[f] = tuple(base_len[f] * s * m for m in (1.0, 0.72, 0.55))
        r = base_rad[f] * rng.uniform(0.9, 1.15)
        radii[f] = (r, 0.92 * r, 0.85 * r)
    return ProceduralHand(
        joint_angles=sample_pose(rng),
        segment_lengths=lengths,
        segment_radii=radii,
        palm_size=(
            0.42 * rng.uniform(0.9, 1.1),
            0.52 * rng.uniform(0.9, 1.1),
            0.16 * rng.uniform(0.9, 1.1),
        ),
        camera=sample_camera(rng, image_size),
    )
