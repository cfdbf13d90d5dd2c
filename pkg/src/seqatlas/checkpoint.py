"""Binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint32 header length, JSON
header (architecture, training config, iteration, RNG state, array
manifest), then raw little-endian float32 array payloads in manifest
order, and a trailing CRC32 over the payload bytes. Training math runs in
float64 but storage is float32; a saved file reloads to the same float32
values, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import AtlasModel, ModelConfig

MAGIC = b"SQATLAS1"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    params: dict
    opt_m: dict | None
    opt_v: dict | None
    step: int
    iteration: int
    rng_state: dict | None

    def to_model(self) -> AtlasModel:
        model = AtlasModel(self.model_config, seed=0)
        for name in model.param_names():
            if name not in self.params:
                raise DataError(f"checkpoint lacks parameter block {name!r}")
            if model.params[name].shape != self.params[name].shape:
                raise DataError(f"checkpoint shape mismatch for {name!r}")
            model.params[name] = self.params[name].astype(np.float64)
        return model


def save_checkpoint(
    path,
    model: AtlasModel,
    train_config: dict | None = None,
    opt_state=None,
    iteration: int = 0,
    rng_state: dict | None = None,
) -> None:
    names = model.param_names()
    manifest = [
        {"name": n, "kind": "param", "shape": list(model.params[n].shape)}
        for n in names
    ]
    blocks = [model.params[n] for n in names]
    step = 0
    if opt_state is not None:
        step = opt_state.step
        for kind, store in (("m", opt_state.m), ("v", opt_state.v)):
            for n in names:
                manifest.append({"name": n, "kind": kind, "shape": list(store[n].shape)})
                blocks.append(store[n])
    header = {
        "model": model.config.to_dict(),
        "train": train_config or {},
        "iteration": int(iteration),
        "optimizer_step": int(step),
        "rng_state": rng_state,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise DataError(
            f"{path}: checkpoint format version {version}, expected {VERSION}"
        )
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + hlen > len(blob):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from None
    off += hlen

    manifest = header["arrays"]
    sizes = [int(np.prod(a["shape"])) * 4 for a in manifest]
    payload_len = sum(sizes)
    if off + payload_len + 4 > len(blob):
        raise DataError(f"{path}: truncated payload")
    payload = blob[off : off + payload_len]
    (crc_stored,) = struct.unpack_from("<I", blob, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DataError(f"{path}: payload checksum mismatch")

    arrays: dict[str, dict] = {"param": {}, "m": {}, "v": {}}
    pos = 0
    for entry, size in zip(manifest, sizes):
        arr = np.frombuffer(payload[pos : pos + size], dtype="<f4").reshape(
            entry["shape"]
        )
        arrays[entry["kind"]][entry["name"]] = arr.astype(np.float64)
        pos += size

    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model"]),
        train_config=header.get("train", {}),
        params=arrays["param"],
        opt_m=arrays["m"] or None,
        opt_v=arrays["v"] or None,
        step=int(header.get("optimizer_step", 0)),
        iteration=int(header.get("iteration", 0)),
        rng_state=header.get("rng_state"),
    )
