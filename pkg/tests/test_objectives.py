"""Loss functions: Chamfer (numpy and tape), metric consistency, batch total."""

import numpy as np
import pytest

from seqatlas.autodiff import Tape
from seqatlas.model import decode_batch_with_jacobian
from seqatlas.objectives import (
    LossBreakdown,
    chamfer_distance,
    chamfer_loss,
    chamfer_node,
    metric_consistency,
    metric_consistency_node,
    total_loss_node,
)
from seqatlas.sampling import sample_uv_uniform
from atlas_builders import rel_err, tiny_model


def _chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    # O(n*m) dense distance matrix; same subtract/square/sum-3 arithmetic
    d2 = np.square(a.T[:, None, :] - b.T[None, :, :]).sum(axis=2)
    return float(np.sum(d2.min(axis=1)) / a.shape[1] + np.sum(d2.min(axis=0)) / b.shape[1])


# ----------------------------------------------------------------------
# numpy chamfer
# ----------------------------------------------------------------------


def test_chamfer_identical_clouds_zero():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 40))
    assert chamfer_distance(a, a.copy()) == 0.0


def test_chamfer_single_points():
    a = np.array([[0.0], [0.0], [0.0]])
    b = np.array([[1.0], [2.0], [2.0]])
    assert chamfer_distance(a, b) == 18.0


def test_chamfer_hand_example_asymmetric_sizes():
    a = np.array([[0.0], [0.0], [0.0]])
    b = np.array([[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]])
    # a->b: 1.0; b->a: (1 + 4) / 2
    assert chamfer_distance(a, b) == 3.5


def test_chamfer_symmetric_in_arguments():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(3, 33))
    b = rng.uniform(size=(3, 57))
    assert chamfer_distance(a, b) == chamfer_distance(b, a)


def test_chamfer_equals_brute_force_50_instances():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n = int(rng.integers(1, 201))
        m = int(rng.integers(1, 201))
        a = rng.uniform(-1, 1, size=(3, n))
        b = rng.uniform(-1, 1, size=(3, m))
        if trial % 5 == 0 and m > 1:
            b[:, 0] = b[:, 1]  # duplicated targets exercise NN ties
        assert chamfer_distance(a, b) == _chamfer_brute(a, b), trial


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((3, 0)), np.zeros((3, 4)))


def test_chamfer_loss_averages_frames():
    rng = np.random.default_rng(3)
    surfaces = [rng.uniform(size=(3, 20)) for _ in range(3)]
    clouds = [rng.uniform(size=(3, 25)) for _ in range(3)]
    per_frame = [chamfer_distance(s, c) for s, c in zip(surfaces, clouds)]
    assert chamfer_loss(surfaces, clouds) == float(np.mean(per_frame))


def test_chamfer_loss_rejects_mismatched_or_empty():
    a = [np.ones((3, 2))]
    with pytest.raises(ValueError):
        chamfer_loss(a, [])
    with pytest.raises(ValueError):
        chamfer_loss([], [])


# ----------------------------------------------------------------------
# metric consistency (numpy)
# ----------------------------------------------------------------------


def test_metric_consistency_zero_for_identical():
    rng = np.random.default_rng(4)
    j = rng.normal(size=(12, 3, 2))
    g = np.einsum("ndi,ndj->nij", j, j)
    assert metric_consistency(g, g.copy()) == 0.0


def test_metric_consistency_symmetric_in_arguments():
    rng = np.random.default_rng(5)
    gi = rng.normal(size=(9, 2, 2))
    gj = rng.normal(size=(9, 2, 2))
    assert metric_consistency(gi, gj) == metric_consistency(gj, gi)


def test_metric_consistency_hand_value():
    gi = np.array([[[3.0, 1.0], [1.0, 4.0]]])
    gj = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    # difference [[2,1],[1,3]]: 4 + 1 + 1 + 9
    assert metric_consistency(gi, gj) == 15.0


def test_metric_consistency_matches_per_sample_loop():
    rng = np.random.default_rng(6)
    gi = rng.normal(size=(31, 2, 2))
    gj = rng.normal(size=(31, 2, 2))
    loop = np.mean([np.sum(np.square(gi[k] - gj[k])) for k in range(31)])
    assert abs(metric_consistency(gi, gj) - loop) < 1e-15


def test_metric_consistency_checks_uv_alignment():
    g = np.zeros((4, 2, 2))
    uv_a = np.zeros((2, 4))
    uv_b = np.ones((2, 4))
    with pytest.raises(ValueError):
        metric_consistency(g, g, uv_a, uv_b)
    with pytest.raises(ValueError):
        metric_consistency(g, np.zeros((5, 2, 2)))


# ----------------------------------------------------------------------
# tape chamfer
# ----------------------------------------------------------------------


def test_chamfer_node_value_matches_numpy():
    rng = np.random.default_rng(7)
    for _ in range(10):
        ns = int(rng.integers(5, 60))
        nc = int(rng.integers(5, 60))
        surf = rng.uniform(size=(3, ns))
        cloud = rng.uniform(size=(3, nc))
        tape = Tape()
        node = chamfer_node(tape, [tape.const(surf)], cloud)
        assert abs(node.value - chamfer_distance(surf, cloud)) < 1e-12


def test_chamfer_node_split_invariant():
    rng = np.random.default_rng(8)
    surf = rng.uniform(size=(3, 24))
    cloud = rng.uniform(size=(3, 31))
    t1 = Tape()
    whole = chamfer_node(t1, [t1.const(surf)], cloud).value
    t2 = Tape()
    split = chamfer_node(
        t2, [t2.const(surf[:, :7]), t2.const(surf[:, 7:20]), t2.const(surf[:, 20:])],
        cloud,
    ).value
    assert abs(whole - split) < 1e-12


def test_chamfer_node_gradient_matches_fd():
    rng = np.random.default_rng(9)
    surf = rng.uniform(size=(3, 12))
    cloud = rng.uniform(size=(3, 17))
    tape = Tape()
    leaf = tape.input(surf, "surface")
    loss = chamfer_node(tape, [leaf], cloud)
    (g,) = tape.grad(loss, [leaf])
    h = 1e-6
    fd = np.zeros_like(surf)
    for idx in np.ndindex(*surf.shape):
        up = surf.copy()
        up[idx] += h
        dn = surf.copy()
        dn[idx] -= h
        fd[idx] = (chamfer_distance(up, cloud) - chamfer_distance(dn, cloud)) / (2 * h)
    assert rel_err(fd, g) < 1e-5


def test_chamfer_node_zero_at_perfect_overlap():
    rng = np.random.default_rng(10)
    cloud = rng.uniform(size=(3, 20))
    tape = Tape()
    node = chamfer_node(tape, [tape.const(cloud.copy())], cloud)
    assert abs(node.value) < 1e-12
    # at a perfect overlap the two directions cancel; gradient is zero
    leaf_tape = Tape()
    leaf = leaf_tape.input(cloud.copy(), "surface")
    (g,) = leaf_tape.grad(chamfer_node(leaf_tape, [leaf], cloud), [leaf])
    assert np.max(np.abs(g)) < 1e-12


# ----------------------------------------------------------------------
# tape metric consistency
# ----------------------------------------------------------------------


def _patch_jacs(tape, model, patch, uv, code_node, leaves):
    uv_node = tape.const(uv)
    part = model.decode(tape, leaves, patch, uv_node, code_node)
    return tape.jacobian(part, uv_node)


def test_metric_consistency_node_matches_numpy():
    model = tiny_model(seed=11)
    rng = np.random.default_rng(12)
    uv = rng.uniform(size=(2, 14))
    z0 = rng.uniform(-1, 1, size=(model.config.code_dim, 1))
    z1 = rng.uniform(-1, 1, size=(model.config.code_dim, 1))

    tape = Tape()
    leaves = model.bind(tape)
    c0, c1 = tape.const(z0), tape.const(z1)
    jacs_i = [_patch_jacs(tape, model, k, uv, c0, leaves) for k in range(2)]
    jacs_j = [_patch_jacs(tape, model, k, uv, c1, leaves) for k in range(2)]
    node = metric_consistency_node(tape, jacs_i, jacs_j)

    mets = []
    for z in (z0, z1):
        stack = [decode_batch_with_jacobian(model, k, uv, z)[2] for k in range(2)]
        mets.append(np.concatenate(stack, axis=0))
    ref = metric_consistency(mets[0], mets[1])
    assert abs(node.value - ref) < 1e-12


def test_metric_consistency_node_zero_for_same_code():
    model = tiny_model(seed=13)
    rng = np.random.default_rng(14)
    uv = rng.uniform(size=(2, 6))
    z = rng.uniform(-1, 1, size=(model.config.code_dim, 1))
    tape = Tape()
    leaves = model.bind(tape)
    cz = tape.const(z)
    jacs_i = [_patch_jacs(tape, model, k, uv, cz, leaves) for k in range(2)]
    jacs_j = [_patch_jacs(tape, model, k, uv, cz, leaves) for k in range(2)]
    node = metric_consistency_node(tape, jacs_i, jacs_j)
    assert node.value == 0.0


def test_metric_consistency_node_rejects_misaligned():
    model = tiny_model(seed=15)
    tape = Tape()
    leaves = model.bind(tape)
    z = tape.const(np.zeros((model.config.code_dim, 1)))
    uv_a = np.random.default_rng(0).uniform(size=(2, 4))
    uv_b = np.random.default_rng(0).uniform(size=(2, 5))
    ja = [_patch_jacs(tape, model, 0, uv_a, z, leaves)]
    jb = [_patch_jacs(tape, model, 0, uv_b, z, leaves)]
    with pytest.raises(ValueError):
        metric_consistency_node(tape, ja, jb)
    with pytest.raises(ValueError):
        metric_consistency_node(tape, ja, [])


# ----------------------------------------------------------------------
# total batch loss
# ----------------------------------------------------------------------


def _batch_setup(model, num_frames=2, pts=30, seed=0):
    rng = np.random.default_rng(seed)
    clouds = {f: rng.uniform(size=(3, pts)) for f in range(num_frames)}
    tape = Tape()
    leaves = model.bind(tape)
    codes = {f: model.encode(tape, leaves, clouds[f]) for f in clouds}
    return tape, leaves, codes, clouds


def test_total_loss_alpha_zero_is_pure_chamfer():
    model = tiny_model(seed=16)
    tape, leaves, codes, clouds = _batch_setup(model)
    uv = sample_uv_uniform(20, 2, np.random.default_rng(1))
    total, br = total_loss_node(tape, model, leaves, codes, clouds,
                                [(0, 1)], [uv], alpha_mc=0.0)
    assert br.metric == 0.0
    assert br.total == br.chamfer
    surfaces = []
    for f in (0, 1):
        z = codes[f].value
        parts = [model.decode_np(k, uv.for_patch(k), z) for k in range(2)]
        surfaces.append(np.concatenate(parts, axis=1))
    ref = chamfer_loss(surfaces, [clouds[0], clouds[1]])
    assert abs(br.chamfer - ref) < 1e-12


def test_total_loss_breakdown_adds_up():
    model = tiny_model(seed=17)
    tape, leaves, codes, clouds = _batch_setup(model, num_frames=3)
    rng = np.random.default_rng(2)
    pairs = [(0, 1), (1, 2)]
    uv_sets = [sample_uv_uniform(16, 2, rng) for _ in pairs]
    total, br = total_loss_node(tape, model, leaves, codes, clouds,
                                pairs, uv_sets, alpha_mc=0.25)
    assert isinstance(br, LossBreakdown)
    assert br.alpha_mc == 0.25
    assert br.metric > 0.0
    assert abs(br.total - (br.chamfer + br.metric)) < 1e-15
    assert abs(float(total.value) - br.total) < 1e-15


def test_total_loss_metric_zero_for_identical_frames():
    model = tiny_model(seed=18)
    rng = np.random.default_rng(3)
    cloud = rng.uniform(size=(3, 25))
    clouds = {0: cloud, 1: cloud.copy()}
    tape = Tape()
    leaves = model.bind(tape)
    codes = {f: model.encode(tape, leaves, clouds[f]) for f in clouds}
    uv = sample_uv_uniform(18, 2, rng)
    _, br = total_loss_node(tape, model, leaves, codes, clouds,
                            [(0, 1)], [uv], alpha_mc=5.0)
    assert br.metric == 0.0


def test_total_loss_gradients_flow_to_all_blocks():
    model = tiny_model(seed=19)
    tape, leaves, codes, clouds = _batch_setup(model, seed=4)
    uv = sample_uv_uniform(14, 2, np.random.default_rng(5))
    total, _ = total_loss_node(tape, model, leaves, codes, clouds,
                               [(0, 1)], [uv], alpha_mc=0.5)
    names = model.param_names()
    grads = tape.grad(total, [leaves[n] for n in names])
    by_name = dict(zip(names, grads))
    # every decoder weight and the encoder head receive signal
    for name in names:
        if name.endswith(".w") or name.endswith(".w_uv"):
            assert np.any(by_name[name] != 0.0), name


def test_total_loss_rejects_unknown_frame():
    model = tiny_model(seed=20)
    tape, leaves, codes, clouds = _batch_setup(model)
    uv = sample_uv_uniform(8, 2, np.random.default_rng(6))
    with pytest.raises(ValueError):
        total_loss_node(tape, model, leaves, codes, clouds, [(0, 5)], [uv], 0.1)
    with pytest.raises(ValueError):
        total_loss_node(tape, model, leaves, codes, clouds, [(0, 1)], [], 0.1)
