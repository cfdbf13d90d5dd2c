"""Point-cloud sequence ingestion, file formats, scaling and alignment.

Supported formats: PLY (ascii and binary_little_endian, vertex x/y/z),
whitespace XYZ, and OBJ meshes (either taking the vertices directly or
sampling the surface when a point budget is given). Clouds are stored as
(3, n) float64 column arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .objectives import chamfer_distance
from .sampling import sample_mesh_surface


@dataclass
class PointCloudSequence:
    """Ordered frames with optional ground-truth correspondence ids.

    `ids[k][c]` is the material-point id of column c in frame k: points
    with equal ids across frames are physically the same spot. `metadata`
    records provenance (source files, unit-cube scale, alignment angles).
    """

    frames: list
    ids: list | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise DataError("sequence has no frames")
        for k, f in enumerate(self.frames):
            if f.ndim != 2 or f.shape[0] != 3:
                raise DataError(f"frame {k} is not a (3, n) array")
            if not np.all(np.isfinite(f)):
                raise DataError(f"frame {k} contains non-finite coordinates")
        if self.ids is not None:
            if len(self.ids) != len(self.frames):
                raise DataError("id list count does not match frame count")
            for k, (f, i) in enumerate(zip(self.frames, self.ids)):
                if len(i) != f.shape[1]:
                    raise DataError(f"frame {k}: id count != point count")

    def __len__(self):
        return len(self.frames)


# ----------------------------------------------------------------------
# parsers
# ----------------------------------------------------------------------


def read_xyz(path) -> np.ndarray:
    pts = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected 3 coordinates")
            try:
                pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number") from None
    if not pts:
        raise DataError(f"{path}: no points")
    return np.asarray(pts, dtype=np.float64).T


def write_xyz(path, cloud: np.ndarray) -> None:
    with open(path, "w") as fh:
        for x, y, z in cloud.T:
            # repr of a python float is shortest-exact; numpy scalar repr
            # carries a type prefix and would not parse back
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def read_ply(path) -> np.ndarray:
    """Vertex x/y/z of an ascii or binary_little_endian PLY file, as (3, n)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise DataError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = None
        props = []  # (name, dtype) in declaration order, vertex element only
        in_vertex = False
        while True:
            raw = fh.readline()
            if not raw:
                raise DataError(f"{path}: unterminated PLY header")
            line = raw.decode("ascii", "replace").strip()
            if line == "end_header":
                break
            tok = line.split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise DataError(f"{path}: list property in vertex element")
                if tok[1] not in _PLY_TYPES:
                    raise DataError(f"{path}: unsupported property type {tok[1]!r}")
                props.append((tok[2], _PLY_TYPES[tok[1]][0]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise DataError(f"{path}: unsupported PLY format {fmt!r}")
        if n_vertex is None:
            raise DataError(f"{path}: no vertex element")
        names = [n for n, _ in props]
        for needed in ("x", "y", "z"):
            if needed not in names:
                raise DataError(f"{path}: vertex element lacks property {needed!r}")
        if fmt == "ascii":
            rows = []
            for _ in range(n_vertex):
                line = fh.readline().decode("ascii", "replace").split()
                if len(line) < len(props):
                    raise DataError(f"{path}: truncated vertex data")
                rows.append([float(v) for v in line[: len(props)]])
            data = np.asarray(rows, dtype=np.float64)
            cols = {n: data[:, i] for i, (n, _) in enumerate(props)}
        else:
            dt = np.dtype([(n, t) for n, t in props])
            buf = fh.read(dt.itemsize * n_vertex)
            if len(buf) != dt.itemsize * n_vertex:
                raise DataError(f"{path}: truncated vertex data")
            rec = np.frombuffer(buf, dtype=dt)
            cols = {n: rec[n].astype(np.float64) for n, _ in props}
        return np.stack([cols["x"], cols["y"], cols["z"]])


def write_ply(path, cloud: np.ndarray, binary: bool = True) -> None:
    """Write a cloud as PLY with double-precision x/y/z (exact round-trip)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    n = cloud.shape[1]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cloud.T, dtype="<f8").tobytes())
        else:
            for x, y, z in cloud.T:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii"))


def read_obj(path):
    """Vertices (V, 3), faces (F, 3) and UVs (V, 2) or None from an OBJ file.

    Faces are triangulated by fanning; only the vertex index of each face
    corner is kept (texture/normal indices are parsed but discarded).
    """
    verts, uvs, faces = [], [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
                elif tok[0] == "vt":
                    uvs.append([float(tok[1]), float(tok[2])])
                elif tok[0] == "f":
                    corner = [int(t.split("/")[0]) for t in tok[1:]]
                    corner = [c - 1 if c > 0 else len(verts) + c for c in corner]
                    for a, b in zip(corner[1:], corner[2:]):
                        faces.append([corner[0], a, b])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed OBJ line") from None
    if not verts:
        raise DataError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64) if faces else np.zeros((0, 3), np.int64)
    t = np.asarray(uvs, dtype=np.float64) if uvs else None
    return v, f, t


# ----------------------------------------------------------------------
# sequence assembly
# ----------------------------------------------------------------------


def _load_one(path, mesh_points: int | None, rng) -> tuple:
    """Returns (cloud (3, n), ids or None)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path), None
    if suffix == ".ply":
        return read_ply(path), None
    if suffix == ".obj":
        verts, faces, _ = read_obj(path)
        if mesh_points is not None:
            if len(faces) == 0:
                raise DataError(f"{path}: no faces to sample")
            return sample_mesh_surface(verts, faces, mesh_points, rng), None
        # vertices taken directly: vertex index doubles as a material id
        return verts.T.copy(), np.arange(verts.shape[0], dtype=np.int64)
    raise DataError(f"{path}: unknown point-cloud format {suffix!r}")


def load_sequence(
    paths: list,
    mesh_points: int | None = None,
    ids_path=None,
    seed: int = 0,
    unit_scale: bool = True,
) -> PointCloudSequence:
    """Load ordered frame files into a scaled PointCloudSequence.

    Mesh files with a `mesh_points` budget are surface-sampled; meshes
    loaded as raw vertices get automatic ids when every frame has the
    same vertex count. An explicit ids file (one integer per line,
    applying to every frame) overrides that. The whole sequence is scaled
    uniformly so the first frame's longest bounding-box side is 1.
    """
    if not paths:
        raise DataError("no input files")
    rng = np.random.default_rng(seed)
    frames, id_lists = [], []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"{p}: file not found")
        cloud, ids = _load_one(p, mesh_points, rng)
        frames.append(cloud)
        id_lists.append(ids)

    ids = None
    if ids_path is not None:
        shared = np.loadtxt(ids_path, dtype=np.int64, ndmin=1)
        ids = [shared.copy() for _ in frames]
    elif all(i is not None for i in id_lists):
        counts = {f.shape[1] for f in frames}
        if len(counts) == 1:
            ids = id_lists
        # inconsistent vertex counts: silently no ids (caller may not care)

    scale = 1.0
    if unit_scale:
        extent = frames[0].max(axis=1) - frames[0].min(axis=1)
        longest = float(extent.max())
        if longest <= 0:
            raise DataError("first frame is degenerate (zero extent)")
        scale = 1.0 / longest
        frames = [f * scale for f in frames]

    meta = {"source_files": [str(p) for p in paths], "scale": scale}
    return PointCloudSequence(frames=frames, ids=ids, metadata=meta)


def save_sequence(seq: PointCloudSequence, out_dir, binary: bool = True) -> list:
    """Write frame_####.ply files (+ ids.txt when present); returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(seq.frames):
        p = out / f"frame_{k:04d}.ply"
        write_ply(p, frame, binary=binary)
        paths.append(p)
    if seq.ids is not None:
        # synthetic and constant-topology sequences share one id column
        np.savetxt(out / "ids.txt", np.asarray(seq.ids[0], dtype=np.int64), fmt="%d")
    return paths


# ----------------------------------------------------------------------
# alignment
# ----------------------------------------------------------------------


def rotation_about_y(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def align_sequence(
    seq: PointCloudSequence, resolution_deg: float = 1.0
) -> PointCloudSequence:
    """Undo per-frame rotation drift about the vertical (y) axis.

    Greedy sequential: each frame k >= 1 tries every candidate angle on a
    grid of the given resolution and keeps the one minimizing Chamfer
    distance to the already-aligned frame k-1. Ties prefer the smallest
    rotation magnitude. Chosen angles land in metadata["align_angles"].
    """
    if len(seq) < 2:
        raise DataError("alignment needs at least two frames")
    if resolution_deg <= 0:
        raise DataError("angle resolution must be positive")
    candidates = np.arange(-180.0, 180.0, resolution_deg)
    # evaluate small magnitudes first so ties keep the least rotation
    candidates = candidates[np.argsort(np.abs(candidates), kind="stable")]
    aligned = [seq.frames[0].copy()]
    angles = [0.0]
    for k in range(1, len(seq)):
        best_angle, best_cd, best_cloud = None, np.inf, None
        for ang in candidates:
            rotated = rotation_about_y(ang) @ seq.frames[k]
            cd = chamfer_distance(rotated, aligned[k - 1])
            if cd < best_cd:
                best_angle, best_cd, best_cloud = float(ang), cd, rotated
        aligned.append(best_cloud)
        angles.append(best_angle)
    meta = dict(seq.metadata)
    meta["align_angles"] = angles
    return PointCloudSequence(frames=aligned, ids=seq.ids, metadata=meta)
