"""Analytic deforming sequences with exact ground-truth correspondence.

Every frame transforms the SAME material points, so ids are simply the
sample indices. The bending plane is an exact isometry of the unit square
for every amplitude; the articulated shapes are piecewise-rigid (isometric
away from the crease).
"""

from __future__ import annotations

import numpy as np

from .data import PointCloudSequence

KINDS = ("bending-plane", "articulated-cylinder", "swinging-arm")


def bending_plane_map(st: np.ndarray, curvature: float) -> np.ndarray:
    """Roll the unit square toward a cylinder of radius 1/curvature.

    `st` is (2, n) material coordinates in [0,1]^2. Arc length along s is
    preserved exactly, so the deformation is isometric for any curvature.
    """
    s = st[0] - 0.5
    t = st[1]
    if abs(curvature) < 1e-12:
        return np.stack([s, t, np.zeros_like(s)])
    x = np.sin(curvature * s) / curvature
    z = (1.0 - np.cos(curvature * s)) / curvature
    return np.stack([x, t, z])


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def articulated_cylinder_map(base: np.ndarray, theta: float) -> np.ndarray:
    """Bend the upper half of a vertical cylinder about the mid-height joint."""
    joint = np.array([[0.0], [0.5], [0.0]])
    out = base.copy()
    upper = base[1] > 0.5
    out[:, upper] = _rot_z(theta) @ (base[:, upper] - joint) + joint
    return out


def swinging_arm_map(base: np.ndarray, upper_mask: np.ndarray, theta: float) -> np.ndarray:
    """Rotate the upper capsule of a two-segment arm about the joint."""
    joint = np.array([[0.0], [0.5], [0.0]])
    out = base.copy()
    out[:, upper_mask] = _rot_z(theta) @ (base[:, upper_mask] - joint) + joint
    return out


def _cylinder_points(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Material points on the side of a vertical unit-height cylinder."""
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    h = rng.uniform(0.0, 1.0, size=n)
    return np.stack([radius * np.cos(phi), h, radius * np.sin(phi)])


def _capsule_points(
    rng: np.random.Generator, n: int, radius: float, y0: float, y1: float
) -> np.ndarray:
    """Area-proportional samples on a vertical capsule from y0 to y1."""
    length = y1 - y0
    side_area = 2.0 * np.pi * radius * length
    cap_area = 4.0 * np.pi * radius**2  # both hemispheres together
    pts = np.empty((3, n))
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    k_side = int(on_side.sum())
    phi = rng.uniform(0.0, 2.0 * np.pi, size=k_side)
    h = rng.uniform(y0, y1, size=k_side)
    pts[:, on_side] = np.stack([radius * np.cos(phi), h, radius * np.sin(phi)])
    k_cap = n - k_side
    # uniform on a sphere, then fold into the matching end cap
    vec = rng.normal(size=(3, k_cap))
    vec /= np.linalg.norm(vec, axis=0, keepdims=True)
    center_y = np.where(vec[1] >= 0.0, y1, y0)
    cap = radius * vec
    cap[1] += center_y
    pts[:, ~on_side] = cap
    return pts


def generate_synthetic(
    kind: str,
    num_frames: int,
    num_points: int,
    amplitude: float,
    seed: int = 0,
) -> PointCloudSequence:
    """Build a K-frame sequence of one deforming shape.

    amplitude: bending-plane curvature at the last frame; joint angle in
    radians at the last frame (articulated-cylinder) or at the swing peak
    (swinging-arm).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if num_frames < 2:
        raise ValueError("need at least two frames")
    if num_points < 10:
        raise ValueError("need at least ten points")
    rng = np.random.default_rng(seed)
    frames = []
    if kind == "bending-plane":
        st = rng.uniform(0.0, 1.0, size=(2, num_points))
        for k in range(num_frames):
            c = amplitude * k / (num_frames - 1)
            frames.append(bending_plane_map(st, c))
    elif kind == "articulated-cylinder":
        base = _cylinder_points(rng, num_points, radius=0.15)
        for k in range(num_frames):
            theta = amplitude * k / (num_frames - 1)
            frames.append(articulated_cylinder_map(base, theta))
    else:
        lower = _capsule_points(rng, num_points // 2, 0.1, 0.0, 0.5)
        upper = _capsule_points(rng, num_points - num_points // 2, 0.1, 0.5, 1.0)
        base = np.concatenate([lower, upper], axis=1)
        upper_mask = np.zeros(num_points, dtype=bool)
        upper_mask[num_points // 2 :] = True
        for k in range(num_frames):
            theta = amplitude * np.sin(2.0 * np.pi * k / (num_frames - 1))
            frames.append(swinging_arm_map(base, upper_mask, theta))
    ids = [np.arange(num_points, dtype=np.int64) for _ in range(num_frames)]
    meta = {"kind": kind, "amplitude": amplitude, "seed": seed}
    return PointCloudSequence(frames=frames, ids=ids, metadata=meta)
