"""Stochastic sampling: UV points, training pairs, mesh surfaces.

Every sampler takes an explicit numpy Generator so runs are reproducible;
callers wanting parallelism must hand each worker its own seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError


@dataclass
class UvSamples:
    """A batch of UV-domain samples with their patch assignment.

    `patch` is (n,) int, `uv` is (2, n) with both rows in [0, 1].
    """

    patch: np.ndarray
    uv: np.ndarray

    def __len__(self):
        return self.patch.shape[0]

    def for_patch(self, k: int) -> np.ndarray:
        """UV columns (2, m) belonging to patch k."""
        return self.uv[:, self.patch == k]

    def same_tokens(self, other: "UvSamples") -> bool:
        return (
            self.patch.shape == other.patch.shape
            and np.array_equal(self.patch, other.patch)
            and np.array_equal(self.uv, other.uv)
        )


@dataclass
class PairSet:
    """Ordered frame-index pairs drawn for one training batch."""

    pairs: list
    strategy: str
    delta: int


def sample_uv_uniform(n: int, num_patches: int, rng: np.random.Generator) -> UvSamples:
    """n i.i.d. uniform UV points, patches assigned round-robin.

    Round-robin keeps per-patch counts within 1 of each other, so every
    patch sees samples even for small n.
    """
    if n < 1:
        raise ValueError("need at least one UV sample")
    if num_patches < 1:
        raise ValueError("need at least one patch")
    patch = np.arange(n, dtype=np.int64) % num_patches
    uv = rng.uniform(0.0, 1.0, size=(2, n))
    return UvSamples(patch=patch, uv=uv)


def sample_training_pairs(
    num_frames: int,
    delta: int,
    strategy: str,
    count: int,
    rng: np.random.Generator,
) -> PairSet:
    """Draw `count` ordered frame pairs (i, j), i != j, with replacement.

    neighbors: uniform over pairs with |i - j| <= delta. random: uniform
    over all ordered distinct pairs, ignoring delta.
    """
    if num_frames < 2:
        raise ValueError("pair sampling needs at least two frames")
    if strategy not in ("neighbors", "random"):
        raise ValueError(f"unknown pair strategy {strategy!r}")
    if strategy == "neighbors" and delta < 1:
        raise ValueError("delta must be >= 1")
    pairs = []
    if strategy == "neighbors":
        # draw uniformly over the admissible SET; picking i first would
        # overweight pairs near the sequence boundary where windows clip
        admissible = [
            (i, j)
            for i in range(num_frames)
            for j in range(max(0, i - delta), min(num_frames, i + delta + 1))
            if j != i
        ]
        picks = rng.integers(len(admissible), size=count)
        pairs = [admissible[k] for k in picks]
    else:
        # i uniform, then j uniform over the others, is exactly uniform
        # over all ordered distinct pairs
        for _ in range(count):
            i = int(rng.integers(num_frames))
            j = int(rng.integers(num_frames - 1))
            if j >= i:
                j += 1
            pairs.append((i, j))
    return PairSet(pairs=pairs, strategy=strategy, delta=delta)


def sample_uv_regular(
    n: int,
    rng: np.random.Generator,
    iterations: int = 250,
    decay: float = 0.994,
    accept_log: list | None = None,
) -> np.ndarray:
    """Spread n points over [0,1]^2 to be as regular as possible.

    Starts from uniform random points. For 250 outer iterations, each
    point in turn proposes a move of the current step length in a random
    direction; the move is accepted only if it strictly increases that
    point's nearest-neighbor distance. Proposals leaving the unit square
    are rejected. The step starts at 1/(4*sqrt(n)) and decays by 0.994
    per iteration. Returns points as (2, n).

    `accept_log`, when given, receives one (old_nn_dist, new_nn_dist)
    tuple per accepted move.
    """
    if n < 1:
        raise ValueError("need at least one point")
    pts = rng.uniform(0.0, 1.0, size=(n, 2))
    if n == 1:
        # nearest-neighbor distance over an empty set is +inf: no move can
        # ever increase it, so the single point stays where it started
        return pts.T.copy()
    step = 1.0 / (4.0 * np.sqrt(n))
    # nn2[i]: squared distance from point i to its nearest other point;
    # nn_idx[i]: index of that neighbor. Maintained incrementally.
    d, idx = cKDTree(pts).query(pts, k=2)
    nn2 = d[:, 1] ** 2
    nn_idx = idx[:, 1]
    for _ in range(iterations):
        for i in range(n):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            prop = pts[i] + step * np.array([np.cos(ang), np.sin(ang)])
            if prop[0] < 0.0 or prop[0] > 1.0 or prop[1] < 0.0 or prop[1] > 1.0:
                continue
            delta2 = np.square(pts - prop).sum(axis=1)
            delta2[i] = np.inf
            cand_idx = int(np.argmin(delta2))
            cand2 = delta2[cand_idx]
            if cand2 <= nn2[i]:
                continue
            if accept_log is not None:
                accept_log.append((float(np.sqrt(nn2[i])), float(np.sqrt(cand2))))
            pts[i] = prop
            nn2[i] = cand2
            nn_idx[i] = cand_idx
            # other points: i either moved closer to them or away
            closer = delta2 < nn2
            closer[i] = False
            nn2[closer] = delta2[closer]
            nn_idx[closer] = i
            stale = np.flatnonzero((nn_idx == i) & (delta2 > nn2))
            for j in stale:
                if j == i:
                    continue
                row = np.square(pts - pts[j]).sum(axis=1)
                row[j] = np.inf
                nn_idx[j] = int(np.argmin(row))
                nn2[j] = row[nn_idx[j]]
        step *= decay
    return pts.T.copy()


def sample_mesh_surface(
    vertices: np.ndarray,
    faces: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample n points uniformly over a triangle mesh's surface.

    `vertices` is (V, 3), `faces` is (F, 3) integer indices. Triangles are
    chosen area-proportionally, positions drawn by uniform barycentric
    sampling. Returns a cloud as (3, n).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
        raise DataError("mesh has no triangles")
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise DataError("mesh has zero total surface area")
    tri = rng.choice(len(faces), size=n, p=areas / total)
    # uniform in a triangle: fold the unit square along its diagonal
    r1 = rng.uniform(size=n)
    r2 = rng.uniform(size=n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    pts = a[tri] + r1[:, None] * (b[tri] - a[tri]) + r2[:, None] * (c[tri] - a[tri])
    return pts.T.copy()
