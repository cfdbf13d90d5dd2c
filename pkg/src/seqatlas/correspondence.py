"""Dense correspondence between frames through the shared UV domain.

After training, the atlas gives every frame the same 2D parameter domain.
A canonical set of N UV tokens (spread per patch, degenerate patches
filtered) is evaluated on each frame; a source 3D point is matched to its
nearest surface sample, carried to the other frame by the shared token,
and projected onto the target cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericalError
from .model import AtlasModel, decode_batch_with_jacobian
from .sampling import sample_uv_regular

# patches whose area falls below mean/AREA_FILTER_RATIO are dropped
AREA_FILTER_RATIO = 1000.0


@dataclass
class SurfaceSampleSet:
    """One frame's evaluation of the canonical sample tokens.

    Arrays are aligned: column/entry t describes token t. `patch` and `uv`
    are identical across frames built from the same token list; `points`,
    `jacobians`, `metrics` are per-frame.
    """

    frame_index: int
    patch: np.ndarray  # (N,) int
    uv: np.ndarray  # (2, N)
    points: np.ndarray  # (3, N)
    jacobians: np.ndarray  # (N, 3, 2)
    metrics: np.ndarray  # (N, 2, 2)
    active_patches: tuple
    areas: np.ndarray  # per-patch area estimates, length M

    def __len__(self):
        return self.patch.shape[0]

    def same_tokens(self, other: "SurfaceSampleSet") -> bool:
        return np.array_equal(self.patch, other.patch) and np.array_equal(
            self.uv, other.uv
        )


@dataclass
class CorrespondenceMap:
    """f maps each source-cloud point to a target-cloud index."""

    source_frame: int
    target_frame: int
    target_index: np.ndarray  # (n_source,) int
    sq_errors: np.ndarray | None = None  # filled when ground truth is known


def patch_areas(
    model: AtlasModel,
    code: np.ndarray,
    rng: np.random.Generator,
    samples_per_patch: int = 256,
) -> np.ndarray:
    """Monte Carlo surface area of every patch: mean sqrt(det g) over UV."""
    if samples_per_patch < 256:
        raise ValueError("area estimation needs at least 256 samples per patch")
    areas = np.empty(model.config.num_patches)
    for k in range(model.config.num_patches):
        uv = rng.uniform(0.0, 1.0, size=(2, samples_per_patch))
        _, _, metrics = decode_batch_with_jacobian(model, k, uv, code)
        det = metrics[:, 0, 0] * metrics[:, 1, 1] - metrics[:, 0, 1] * metrics[:, 1, 0]
        areas[k] = np.sqrt(np.maximum(det, 0.0)).mean()
    return areas


def _allocate(n: int, active: list) -> list:
    """Spread n samples over the active patches, counts differing by <= 1."""
    base, extra = divmod(n, len(active))
    return [base + (1 if i < extra else 0) for i in range(len(active))]


def build_shared_samples(
    model: AtlasModel,
    codes: list,
    n_samples: int,
    rng: np.random.Generator,
    frame_indices: list | None = None,
) -> list:
    """Canonical token list evaluated on several frames at once.

    Patch filtering uses areas averaged across the given frames so every
    frame shares one token list (a patch degenerate in one frame but not
    others stays if its average area clears the threshold). Returns one
    SurfaceSampleSet per code, all with identical `patch`/`uv`.
    """
    if frame_indices is None:
        frame_indices = list(range(len(codes)))
    per_frame_areas = np.stack([patch_areas(model, z, rng) for z in codes])
    areas = per_frame_areas.mean(axis=0)
    if areas.max() <= 0.0:
        raise NumericalError("every patch has zero estimated area")
    threshold = areas.mean() / AREA_FILTER_RATIO
    # the largest patch always clears mean/ratio, so `active` is non-empty
    active = [k for k in range(model.config.num_patches) if areas[k] >= threshold]
    if n_samples < len(active):
        raise ValueError("need at least one sample per active patch")
    counts = _allocate(n_samples, active)
    patch_tokens = []
    uv_tokens = []
    for k, c in zip(active, counts):
        uv_tokens.append(sample_uv_regular(c, rng))
        patch_tokens.append(np.full(c, k, dtype=np.int64))
    patch_arr = np.concatenate(patch_tokens)
    uv_arr = np.concatenate(uv_tokens, axis=1)

    sets = []
    for fidx, code in zip(frame_indices, codes):
        points = np.empty((3, n_samples))
        jac = np.empty((n_samples, 3, 2))
        mets = np.empty((n_samples, 2, 2))
        for k in active:
            sel = patch_arr == k
            pts_k, jac_k, met_k = decode_batch_with_jacobian(
                model, k, uv_arr[:, sel], code
            )
            points[:, sel] = pts_k
            jac[sel] = jac_k
            mets[sel] = met_k
        sets.append(
            SurfaceSampleSet(
                frame_index=fidx,
                patch=patch_arr,
                uv=uv_arr,
                points=points,
                jacobians=jac,
                metrics=mets,
                active_patches=tuple(active),
                areas=areas.copy(),
            )
        )
    return sets


def build_surface_samples(
    model: AtlasModel,
    code: np.ndarray,
    n_samples: int,
    frame_index: int,
    rng: np.random.Generator,
) -> SurfaceSampleSet:
    """Single-frame canonical sampling (filtering on this frame's areas)."""
    return build_shared_samples(
        model, [code], n_samples, rng, frame_indices=[frame_index]
    )[0]


def project_nearest(queries: np.ndarray, targets: np.ndarray):
    """Nearest-target index per query, squared-distance ties to lowest index.

    `queries` is (3,) for one point (returns int) or (3, n) for a batch
    (returns (n,) int array). `targets` is (3, m), m >= 1.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] != 3 or targets.shape[1] == 0:
        raise ValueError("targets must be a non-empty (3, m) array")
    queries = np.asarray(queries, dtype=np.float64)
    single = queries.ndim == 1
    q = queries.reshape(3, 1) if single else queries
    m = targets.shape[1]
    if m == 1:
        idx = np.zeros(q.shape[1], dtype=np.int64)
        return int(idx[0]) if single else idx
    tree = cKDTree(targets.T)
    d, idx = tree.query(q.T, k=2)
    out = idx[:, 0].astype(np.int64)
    ties = np.flatnonzero(d[:, 0] == d[:, 1])
    for t in ties:
        d2 = np.square(targets - q[:, t : t + 1]).sum(axis=0)
        out[t] = int(np.argmin(d2))  # argmin returns the lowest tied index
    return int(out[0]) if single else out


def map_correspondence(
    cloud_i: np.ndarray,
    cloud_j: np.ndarray,
    samples_i: SurfaceSampleSet,
    samples_j: SurfaceSampleSet,
) -> CorrespondenceMap:
    """Carry every point of cloud_i to its corresponding point in cloud_j.

    Route: nearest surface sample on frame i -> shared UV token -> that
    token's 3D position on frame j -> nearest point of cloud_j.
    """
    if not samples_i.same_tokens(samples_j):
        raise ValueError("sample sets were not built from the same UV tokens")
    tokens = project_nearest(cloud_i, samples_i.points)
    landed = samples_j.points[:, tokens]
    target_idx = project_nearest(landed, cloud_j)
    return CorrespondenceMap(
        source_frame=samples_i.frame_index,
        target_frame=samples_j.frame_index,
        target_index=np.atleast_1d(target_idx),
    )
