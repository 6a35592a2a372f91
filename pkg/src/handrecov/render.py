"""Ray-cast rasterizer for the procedural hand.

Camera frame: x right, y up, z toward the viewer (scene at negative z), so
a sphere centered on the optical axis shows normal (0,0,1) at the image
center. Normals are stored in this camera frame. Depth is the Euclidean
distance along the ray. Every pixel ray is intersected analytically with
each primitive and z-buffered.
"""

from __future__ import annotations

import warnings

import numpy as np

from .hand import ProceduralHand, capsules, skeleton_joints

_MISS = np.inf


def _ray_grid(h: int, w: int, focal: float, cx: float, cy: float) -> np.ndarray:
    """Unit ray directions (h*w, 3) through pixel centers."""
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    x = (jj + 0.5 - cx) / focal
    y = (cy - (ii + 0.5)) / focal
    z = -np.ones_like(x)
    d = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _intersect_capsule(d: np.ndarray, a: np.ndarray, b: np.ndarray, r: float):
    """Nearest hit distance of origin rays with a capsule; inf on miss."""
    u = b - a
    length = np.linalg.norm(u)
    u = u / length
    m = -a  # origin minus segment start
    du = d @ u
    dd = d - du[:, None] * u
    mu = m @ u
    mm = m - mu * u

    A = np.einsum("ij,ij->i", dd, dd)
    B = 2.0 * (dd @ mm)
    C = mm @ mm - r * r
    disc = B * B - 4.0 * A * C
    t_body = np.full(d.shape[0], _MISS)
    ok = (disc >= 0) & (A > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = np.where(ok, (-B - sq) / np.where(A > 1e-12, 2.0 * A, 1.0), _MISS)
    s = mu + np.where(np.isfinite(t), t, 0.0) * du  # axial coordinate of the hit
    valid = ok & (t > 1e-6) & (s >= 0.0) & (s <= length)
    t_body[valid] = t[valid]

    t_caps = np.minimum(_intersect_sphere(d, a, r), _intersect_sphere(d, b, r))
    return np.minimum(t_body, t_caps)


def _intersect_sphere(d: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    B = -2.0 * (d @ c)
    C = c @ c - r * r
    disc = B * B - 4.0 * C
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-B - sq) / 2.0
    return np.where(ok & (t > 1e-6), t, _MISS)


def _frame_perp(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


class StructureRenderError(ValueError):
    pass


def render_structure_arrays(hand: ProceduralHand, kind: str, image_size: int):
    """Render one hand. Returns (values, background_mask, depth).

    values: (c,h,w) in the kind's range; background_mask: (h,w) bool, True
    where no geometry was hit; depth: (h,w) ray distance, 0 on background.
    """
    if hand.camera is None:
        raise StructureRenderError("hand has no camera")
    if kind not in ("normal", "depth", "iuv"):
        raise StructureRenderError(f"unknown structure kind {kind!r}")
    cam = hand.camera
    h = w = image_size
    d = _ray_grid(h, w, cam.focal, cam.cx, cam.cy)
    n_px = d.shape[0]

    prims = []
    for a, b, r in capsules(hand):
        prims.append(("capsule", cam.to_camera(a[None])[0], cam.to_camera(b[None])[0], r))
    palm_c = cam.to_camera(np.zeros((1, 3)))[0]
    prims.append(("palm", palm_c, None, None))

    zbuf = np.full(n_px, _MISS)
    hit_id = np.full(n_px, -1, dtype=np.int32)
    for idx, prim in enumerate(prims):
        if prim[0] == "capsule":
            t = _intersect_capsule(d, prim[1], prim[2], prim[3])
        else:
            t = _intersect_ellipsoid_rotated(d, palm_c, np.asarray(hand.palm_size), cam.rotation)
        closer = t < zbuf
        zbuf[closer] = t[closer]
        hit_id[closer] = idx

    fg = hit_id >= 0
    if not fg.any():
        warnings.warn("hand fully out of frame: empty render", RuntimeWarning)

    background = ~fg.reshape(h, w)
    depth = np.where(fg, zbuf, 0.0).reshape(h, w).astype(np.float32)

    if kind == "depth":
        return depth[None].copy(), background, depth

    pts = d * np.where(fg, zbuf, 0.0)[:, None]
    values = np.zeros((n_px, 3 if kind == "normal" else 2), dtype=np.float64)
    n_parts = len(prims)
    for idx, prim in enumerate(prims):
        sel = hit_id == idx
        if not sel.any():
            continue
        p = pts[sel]
        if prim[0] == "capsule":
            a, b, r = prim[1], prim[2], prim[3]
            u = b - a
            length = np.linalg.norm(u)
            u = u / length
            s = np.clip((p - a) @ u, 0.0, length)
            cp = a + s[:, None] * u
            n = p - cp
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            if kind == "normal":
                values[sel] = n
            else:
                e1, e2 = _frame_perp(u)
                phi = np.arctan2(n @ e2, n @ e1)
                uu = (phi + np.pi) / (2.0 * np.pi)
                vv = (idx + s / length) / n_parts
                values[sel] = np.stack([uu, vv], axis=1)
        else:
            semi = np.asarray(hand.palm_size)
            local = (p - palm_c) @ cam.rotation  # back to hand frame
            n_local = local / (semi * semi)
            n = n_local @ cam.rotation.T
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            if kind == "normal":
                values[sel] = n
            else:
                sph = local / semi
                phi = np.arctan2(sph[:, 1], sph[:, 0])
                uu = (phi + np.pi) / (2.0 * np.pi)
                vv = (idx + (np.clip(sph[:, 2], -1, 1) + 1.0) / 2.0) / n_parts
                values[sel] = np.stack([uu, vv], axis=1)

    values = values.T.reshape(-1, h, w).astype(np.float32)
    values[:, background] = 0.0
    return values, background, depth


def _intersect_ellipsoid_rotated(d, center, semi, rotation):
    # Rays into the hand frame where the palm ellipsoid is axis-aligned.
    d_local = d @ rotation
    c_local = -((-center) @ rotation)  # ellipsoid center seen from origin, hand axes
    return _intersect_ellipsoid_local(d_local, c_local, semi)


def _intersect_ellipsoid_local(d, c, semi):
    inv = 1.0 / semi
    o = -c * inv
    dl = d * inv
    A = np.einsum("ij,ij->i", dl, dl)
    B = 2.0 * (dl @ o)
    C = o @ o - 1.0
    disc = B * B - 4.0 * A * C
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-B - sq) / (2.0 * A)
    return np.where(ok & (t > 1e-6), t, _MISS)


def project_joints(hand: ProceduralHand, depth: np.ndarray, image_size: int):
    """Project skeleton joints; visibility from the rendered depth buffer.

    Returns (joints_px, visible): (21,2) float pixel coords (col,row) and a
    (21,) bool array. A joint is visible when it lands in frame and its ray
    distance is within ~1.6 digit radii of the front surface there.
    """
    cam = hand.camera
    pts = cam.to_camera(skeleton_joints(hand))
    radii = [0.20] + [r for f_r in [hand.segment_radii[f] for f in
                                    ("thumb", "index", "middle", "ring", "pinky")]
                      for r in (f_r[0], f_r[0], f_r[1], f_r[2])]
    cols = cam.cx + cam.focal * (pts[:, 0] / -pts[:, 2])
    rows = cam.cy - cam.focal * (pts[:, 1] / -pts[:, 2])
    dist = np.linalg.norm(pts, axis=1)
    visible = np.zeros(len(pts), dtype=bool)
    for k in range(len(pts)):
        if pts[k, 2] >= 0:
            continue
        i, j = int(rows[k]), int(cols[k])
        if not (0 <= i < image_size and 0 <= j < image_size):
            continue
        front = depth[i, j]
        if front > 0 and dist[k] - front <= 1.6 * radii[k]:
            visible[k] = True
    return np.stack([cols, rows], axis=1), visible
