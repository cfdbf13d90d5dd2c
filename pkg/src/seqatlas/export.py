"""Textured export of the fitted atlas for visual inspection.

Each frame becomes an OBJ whose vertices are the canonical surface
samples and whose texture coordinates are the shared UV tokens; because
the tokens are identical across frames, a single checkerboard texture
shows material correspondence as a stable pattern riding the deformation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import Delaunay, QhullError

from .correspondence import build_shared_samples, map_correspondence
from .model import AtlasModel


def checkerboard_texture(size: int = 512, cells: int = 8) -> Image.Image:
    """A two-color checkerboard; exactly 2 distinct pixel values."""
    idx = np.arange(size) * cells // size
    board = (idx[:, None] + idx[None, :]) % 2
    light = np.array([235, 235, 235], dtype=np.uint8)
    dark = np.array([40, 90, 160], dtype=np.uint8)
    pixels = np.where(board[:, :, None] == 0, light, dark)
    return Image.fromarray(pixels, mode="RGB")


def _patch_faces(patch: np.ndarray, uv: np.ndarray) -> list:
    """Triangulate each patch's UV tokens; returns global index triples."""
    faces = []
    for k in np.unique(patch):
        sel = np.flatnonzero(patch == k)
        if sel.size < 3:
            continue
        try:
            tri = Delaunay(uv[:, sel].T)
        except QhullError:
            continue  # collinear tokens: leave the patch as bare points
        for simplex in tri.simplices:
            faces.append(tuple(sel[simplex]))
    return faces


def _write_obj(path, points: np.ndarray, uv: np.ndarray, faces, mtl_name: str):
    with open(path, "w") as fh:
        fh.write(f"mtllib {mtl_name}\n")
        fh.write("usemtl atlas\n")
        for x, y, z in points.T:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for u, v in uv.T:
            fh.write(f"vt {float(u)!r} {float(v)!r}\n")
        for a, b, c in faces:
            fh.write(f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}\n")


def export_visualization(
    model: AtlasModel,
    sequence,
    n_samples: int,
    out_dir,
    seed: int = 0,
) -> dict:
    """Write per-frame textured OBJs plus texture, material and error CSV.

    Returns a manifest of written paths. Correspondence errors (against
    ground-truth ids, consecutive frame pairs) are only written when the
    sequence carries ids.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codes = [model.encode_np(f) for f in sequence.frames]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA71A5]))
    sets = build_shared_samples(model, codes, n_samples, rng)

    texture_path = out / "texture.png"
    checkerboard_texture().save(texture_path)
    mtl_path = out / "atlas.mtl"
    with open(mtl_path, "w") as fh:
        fh.write("newmtl atlas\nKa 1 1 1\nKd 1 1 1\nmap_Kd texture.png\n")

    faces = _patch_faces(sets[0].patch, sets[0].uv)
    obj_paths = []
    for k, sset in enumerate(sets):
        p = out / f"frame_{k:04d}.obj"
        _write_obj(p, sset.points, sset.uv, faces, mtl_path.name)
        obj_paths.append(p)

    manifest = {
        "objs": [str(p) for p in obj_paths],
        "texture": str(texture_path),
        "material": str(mtl_path),
    }

    if sequence.ids is not None and len(sequence.frames) >= 2:
        err_path = out / "correspondence_errors.csv"
        with open(err_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_frame", "target_frame", "point", "sq_error"])
            for i in range(len(sequence.frames) - 1):
                j = i + 1
                cmap = map_correspondence(
                    sequence.frames[i], sequence.frames[j], sets[i], sets[j]
                )
                pos_j = {int(v): c for c, v in enumerate(sequence.ids[j])}
                cols = [pos_j[int(v)] for v in sequence.ids[i]]
                truth = sequence.frames[j][:, cols]
                pred = sequence.frames[j][:, cmap.target_index]
                sq = np.square(pred - truth).sum(axis=0)
                for p_idx, e in enumerate(sq):
                    writer.writerow([i, j, p_idx, repr(float(e))])
        manifest["errors_csv"] = str(err_path)
    return manifest
