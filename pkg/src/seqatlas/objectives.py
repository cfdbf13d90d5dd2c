"""Training objectives: Chamfer reconstruction, metric consistency, total.

Two flavours live here. The numpy functions (`chamfer_loss`,
`metric_consistency`) are the reference evaluators used at evaluation
time; the `*_node` builders record the same quantities on a tape for
differentiation during training.

The nearest-neighbor assignments inside Chamfer are treated as constant
for differentiation: gradients flow through the distances only. The
kd-tree is used purely to find indices; distances are recomputed with
plain numpy so the accelerated path equals an O(n^2) scan exactly, ties
included (tied indices give equal distance values).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Node, Tape
from .model import AtlasModel
from .sampling import UvSamples


@dataclass
class LossBreakdown:
    """Scalar loss components of one training batch.

    `metric` already includes the alpha_mc weight, so
    total = chamfer + metric always holds.
    """

    chamfer: float
    metric: float
    total: float
    alpha_mc: float


def nearest_indices(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of the nearest target column for every query column (3, n)."""
    tree = cKDTree(targets.T)
    _, idx = tree.query(queries.T, k=1)
    return np.asarray(idx, dtype=np.int64)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided mean squared nearest-neighbor distance between (3, n) sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance of an empty point set")
    ia = nearest_indices(a, b)
    d_ab = np.square(a - b[:, ia]).sum(axis=0)
    ib = nearest_indices(b, a)
    d_ba = np.square(b - a[:, ib]).sum(axis=0)
    return float(np.sum(d_ab) / a.shape[1] + np.sum(d_ba) / b.shape[1])


def chamfer_loss(surfaces: list, clouds: list) -> float:
    """Mean over frames of the two-sided Chamfer between surface and cloud."""
    if len(surfaces) != len(clouds):
        raise ValueError("surfaces and clouds must pair up frame by frame")
    if not surfaces:
        raise ValueError("no frames")
    return float(
        np.mean([chamfer_distance(s, c) for s, c in zip(surfaces, clouds)])
    )


def metric_consistency(
    metrics_i: np.ndarray,
    metrics_j: np.ndarray,
    uv_i: np.ndarray | None = None,
    uv_j: np.ndarray | None = None,
) -> float:
    """Mean squared Frobenius difference of per-sample metric tensors.

    Inputs are (n, 2, 2) stacks evaluated at the same UV tokens; pass the
    UV arrays to have that precondition checked.
    """
    metrics_i = np.asarray(metrics_i, dtype=np.float64)
    metrics_j = np.asarray(metrics_j, dtype=np.float64)
    if metrics_i.shape != metrics_j.shape or metrics_i.ndim != 3:
        raise ValueError("metric stacks must both be (n, 2, 2)")
    if uv_i is not None and uv_j is not None and not np.array_equal(uv_i, uv_j):
        raise ValueError("metric consistency requires identical UV sample lists")
    diff = metrics_i - metrics_j
    return float(np.mean(np.square(diff).sum(axis=(1, 2))))


# ----------------------------------------------------------------------
# tape builders
# ----------------------------------------------------------------------


def chamfer_node(tape: Tape, surface_parts: list, cloud: np.ndarray) -> Node:
    """Chamfer between one frame's decoded surface and its cloud, on tape.

    `surface_parts` are the per-patch decode nodes (3, m_k); their columns
    together form the frame's surface sample set. The cloud is a constant.

    surface-to-cloud uses gathered nearest cloud points. cloud-to-surface
    is written in the expanded form sum|q|^2 - 2 q.s + |s|^2 aggregated per
    surface point (occupancy counts and scattered q-sums), which avoids
    gathering tape values while giving the identical gradient.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    values = [p.value for p in surface_parts]
    ns = sum(v.shape[1] for v in values)
    nc = cloud.shape[1]
    if ns == 0 or nc == 0:
        raise ValueError("chamfer of an empty point set")
    surf_all = np.concatenate(values, axis=1)

    idx_s2c = nearest_indices(surf_all, cloud)
    idx_c2s = nearest_indices(cloud, surf_all)
    counts = np.bincount(idx_c2s, minlength=ns).astype(np.float64)
    qsums = np.zeros((3, ns))
    np.add.at(qsums.T, idx_c2s, cloud.T)

    total = tape.const(0.0)
    offset = 0
    for part in surface_parts:
        m = part.value.shape[1]
        sl = slice(offset, offset + m)
        # direction 1: this patch's surface points to their cloud targets
        gathered = tape.const(cloud[:, idx_s2c[sl]])
        diff = tape.sub(part, gathered)
        term1 = tape.div(tape.sum(tape.square(diff)), tape.const(float(ns)))
        # direction 2, aggregated: counts * |s|^2 - 2 s . qsum
        c_row = tape.const(counts[sl][None, :])
        s2 = tape.sum(tape.square(part), axis=0)
        occ = tape.sum(tape.mul(c_row, s2))
        dot = tape.sum(tape.mul(part, tape.const(qsums[:, sl])))
        term2 = tape.div(
            tape.sub(occ, tape.mul(tape.const(2.0), dot)), tape.const(float(nc))
        )
        total = tape.add(total, tape.add(term1, term2))
        offset += m
    q2 = float(np.square(cloud).sum())
    return tape.add(total, tape.const(q2 / nc))


def metric_entries(tape: Tape, ju: Node, jv: Node):
    """Rows g11, g12, g22 (1, m) of the first fundamental form per column."""
    g11 = tape.sum(tape.square(ju), axis=0)
    g12 = tape.sum(tape.mul(ju, jv), axis=0)
    g22 = tape.sum(tape.square(jv), axis=0)
    return g11, g12, g22


def metric_consistency_node(tape: Tape, jacs_i: list, jacs_j: list) -> Node:
    """Mean Frobenius-squared metric difference over shared UV samples.

    `jacs_i` and `jacs_j` hold per-patch (ju, jv) node pairs for the two
    frames, evaluated at the same UV columns patch by patch.
    """
    if len(jacs_i) != len(jacs_j):
        raise ValueError("per-patch Jacobian lists must align")
    n = sum(ju.value.shape[1] for ju, _ in jacs_i)
    total = tape.const(0.0)
    for (jui, jvi), (juj, jvj) in zip(jacs_i, jacs_j):
        if jui.value.shape != juj.value.shape:
            raise ValueError("metric consistency requires identical UV sample lists")
        a11, a12, a22 = metric_entries(tape, jui, jvi)
        b11, b12, b22 = metric_entries(tape, juj, jvj)
        d11 = tape.square(tape.sub(a11, b11))
        d12 = tape.square(tape.sub(a12, b12))
        d22 = tape.square(tape.sub(a22, b22))
        # off-diagonal appears twice in the 2x2 Frobenius norm
        fro = tape.add(tape.add(d11, d22), tape.mul(tape.const(2.0), d12))
        total = tape.add(total, tape.sum(fro))
    return tape.div(total, tape.const(float(n)))


def total_loss_node(
    tape: Tape,
    model: AtlasModel,
    leaves: dict,
    codes: dict,
    clouds: dict,
    pairs: list,
    uv_sets: list,
    alpha_mc: float,
):
    """Record the full batch loss; returns (total node, LossBreakdown).

    `pairs` lists (i, j) frame indices, `uv_sets` the shared UvSamples of
    each pair, `codes` tape nodes of each frame's latent, `clouds` the raw
    per-frame point arrays. Chamfer averages over the distinct frames of
    the batch, each decoded once (at the UV set of its first pair); the
    consistency energy averages over pairs. Jacobian work is skipped
    entirely when alpha_mc is 0.
    """
    if len(pairs) != len(uv_sets):
        raise ValueError("one UV sample set per pair required")
    for i, j in pairs:
        if i not in clouds or j not in clouds:
            raise ValueError(f"pair ({i}, {j}) references a frame not in the batch")

    decoded: dict[int, list] = {}
    pair_energies = []
    for (i, j), uv in zip(pairs, uv_sets):
        jacs = {}
        for f in (i, j):
            parts, fjacs = [], []
            for k in range(model.config.num_patches):
                cols = uv.for_patch(k)
                if cols.shape[1] == 0:
                    continue
                uv_node = tape.const(cols)
                part = model.decode(tape, leaves, k, uv_node, codes[f])
                parts.append(part)
                if alpha_mc != 0.0:
                    # jacobian immediately after the decode keeps the
                    # forward sweep confined to this patch's subgraph
                    fjacs.append(tape.jacobian(part, uv_node))
            jacs[f] = fjacs
            if f not in decoded:
                decoded[f] = parts
        if alpha_mc != 0.0:
            pair_energies.append(metric_consistency_node(tape, jacs[i], jacs[j]))

    frames = list(decoded.keys())
    ch_total = tape.const(0.0)
    for f in frames:
        ch_total = tape.add(ch_total, chamfer_node(tape, decoded[f], clouds[f]))
    ch_mean = tape.div(ch_total, tape.const(float(len(frames))))

    if pair_energies:
        e_total = tape.const(0.0)
        for e in pair_energies:
            e_total = tape.add(e_total, e)
        e_mean = tape.div(e_total, tape.const(float(len(pair_energies))))
        metric_term = tape.mul(tape.const(float(alpha_mc)), e_mean)
    else:
        metric_term = tape.const(0.0)

    total = tape.add(ch_mean, metric_term)
    breakdown = LossBreakdown(
        chamfer=float(ch_mean.value),
        metric=float(metric_term.value),
        total=float(total.value),
        alpha_mc=float(alpha_mc),
    )
    return total, breakdown
