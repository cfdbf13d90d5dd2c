"""Encoder and multi-patch decoder networks built on the tape engine.

The model maps a frame's point cloud to a latent code (PointNet-style
encoder: shared per-point MLP, channel-wise max pool, tanh head) and maps
2D patch coordinates plus that code to 3D surface points (one MLP per
patch, softplus hidden activations, linear output).

Parameters live in a flat name -> float64 array dict so the optimizer,
checkpoints and tests can treat the model as a single vector. Convention
for data arrays: points are columns, so a cloud is (3, n) and a batch of
UV samples is (2, n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults reproduce the reference setup; tests shrink the widths to
    keep runtimes down. `encoder_widths` are the per-point MLP layers
    before the pool; `code_dim` is the latent size produced after it.
    """

    num_patches: int = 10
    code_dim: int = 1024
    encoder_widths: tuple = (64, 128, 1024)
    decoder_hidden: tuple = (512, 512, 256)

    def validate(self) -> None:
        if self.num_patches < 1:
            raise ValueError("num_patches must be >= 1")
        if self.code_dim < 1:
            raise ValueError("code_dim must be >= 1")
        if len(self.encoder_widths) < 1 or len(self.decoder_hidden) < 1:
            raise ValueError("need at least one hidden layer on each side")

    def to_dict(self) -> dict:
        return {
            "num_patches": self.num_patches,
            "code_dim": self.code_dim,
            "encoder_widths": list(self.encoder_widths),
            "decoder_hidden": list(self.decoder_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            num_patches=int(d["num_patches"]),
            code_dim=int(d["code_dim"]),
            encoder_widths=tuple(int(w) for w in d["encoder_widths"]),
            decoder_hidden=tuple(int(w) for w in d["decoder_hidden"]),
        )
        cfg.validate()
        return cfg


def _init_layer(rng: np.random.Generator, fan_out: int, fan_in: int):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight and bias."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=(fan_out, 1))
    return w, b


class AtlasModel:
    """Parameter container plus tape-graph builders for encoder/decoders."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        p = self.params
        # encoder: shared per-point MLP over 3D points, then pooled head
        fan_in = 3
        for i, width in enumerate(cfg.encoder_widths):
            w, b = _init_layer(rng, width, fan_in)
            p[f"enc.pp{i}.w"], p[f"enc.pp{i}.b"] = w, b
            fan_in = width
        w, b = _init_layer(rng, cfg.code_dim, cfg.encoder_widths[-1])
        p["enc.head.w"], p["enc.head.b"] = w, b
        # decoders: first layer split into a UV block and a code block so
        # the graph can feed the two inputs without a concat primitive
        for k in range(cfg.num_patches):
            h0 = cfg.decoder_hidden[0]
            bound = 1.0 / np.sqrt(2 + cfg.code_dim)
            p[f"dec{k}.l0.w_uv"] = rng.uniform(-bound, bound, size=(h0, 2))
            p[f"dec{k}.l0.w_code"] = rng.uniform(-bound, bound, size=(h0, cfg.code_dim))
            p[f"dec{k}.l0.b"] = rng.uniform(-bound, bound, size=(h0, 1))
            fan_in = h0
            for i, width in enumerate(cfg.decoder_hidden[1:], start=1):
                w, b = _init_layer(rng, width, fan_in)
                p[f"dec{k}.l{i}.w"], p[f"dec{k}.l{i}.b"] = w, b
                fan_in = width
            w, b = _init_layer(rng, 3, fan_in)
            p[f"dec{k}.out.w"], p[f"dec{k}.out.b"] = w, b

    def param_names(self) -> list[str]:
        """Stable ordering used by the optimizer and the checkpoint format."""
        return sorted(self.params.keys())

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def decoder_param_names(self, patch: int) -> list[str]:
        prefix = f"dec{patch}."
        return [n for n in self.param_names() if n.startswith(prefix)]

    # ------------------------------------------------------------------
    # graph builders
    # ------------------------------------------------------------------

    def bind(self, tape: Tape) -> dict[str, Node]:
        """Record every parameter as a named leaf on `tape`."""
        return {
            name: tape.input(self.params[name], name) for name in self.param_names()
        }

    def encode(self, tape: Tape, leaves: dict[str, Node], points: np.ndarray) -> Node:
        """Latent code (C, 1) for one frame's cloud, given as (3, n)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] != 3:
            raise ValueError(f"expected (3, n) cloud, got {points.shape}")
        h = tape.const(points)
        for i in range(len(self.config.encoder_widths)):
            z = tape.matvec(leaves[f"enc.pp{i}.w"], h)
            h = tape.relu(tape.add(z, leaves[f"enc.pp{i}.b"]))
        pooled = tape.max_reduce(h, axis=1)  # (width, 1)
        z = tape.matvec(leaves["enc.head.w"], pooled)
        return tape.tanh(tape.add(z, leaves["enc.head.b"]))

    def decode(
        self,
        tape: Tape,
        leaves: dict[str, Node],
        patch: int,
        uv: Node,
        code: Node,
    ) -> Node:
        """Surface points (3, n) of one patch at UV columns (2, n).

        `uv` must already be a tape node so callers can request Jacobians
        with respect to it. `code` is a (C, 1) node; it broadcasts across
        the n columns through the bias-style add.
        """
        cfg = self.config
        pre = tape.add(
            tape.add(
                tape.matvec(leaves[f"dec{patch}.l0.w_uv"], uv),
                tape.matvec(leaves[f"dec{patch}.l0.w_code"], code),
            ),
            leaves[f"dec{patch}.l0.b"],
        )
        h = tape.softplus(pre)
        for i in range(1, len(cfg.decoder_hidden)):
            z = tape.add(tape.matvec(leaves[f"dec{patch}.l{i}.w"], h), leaves[f"dec{patch}.l{i}.b"])
            h = tape.softplus(z)
        return tape.add(tape.matvec(leaves[f"dec{patch}.out.w"], h), leaves[f"dec{patch}.out.b"])

    # ------------------------------------------------------------------
    # plain numpy forward passes (inference paths, no differentiation)
    # ------------------------------------------------------------------

    def encode_np(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] != 3:
            raise ValueError(f"expected (3, n) cloud, got {points.shape}")
        h = points
        p = self.params
        for i in range(len(self.config.encoder_widths)):
            h = np.maximum(p[f"enc.pp{i}.w"] @ h + p[f"enc.pp{i}.b"], 0.0)
        pooled = h.max(axis=1, keepdims=True)
        return np.tanh(p["enc.head.w"] @ pooled + p["enc.head.b"])

    def decode_np(self, patch: int, uv: np.ndarray, code: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        p = self.params
        pre = p[f"dec{patch}.l0.w_uv"] @ uv + p[f"dec{patch}.l0.w_code"] @ code
        h = np.logaddexp(0.0, pre + p[f"dec{patch}.l0.b"])
        for i in range(1, len(self.config.decoder_hidden)):
            h = np.logaddexp(0.0, p[f"dec{patch}.l{i}.w"] @ h + p[f"dec{patch}.l{i}.b"])
        return p[f"dec{patch}.out.w"] @ h + p[f"dec{patch}.out.b"]

    def decode_all_np(self, uv: np.ndarray, code: np.ndarray) -> np.ndarray:
        """Stacked surface samples (3, M*n): every patch at the same UVs."""
        cols = [self.decode_np(k, uv, code) for k in range(self.config.num_patches)]
        return np.concatenate(cols, axis=1)


@dataclass
class SurfaceSample:
    """One decoded surface point with its differential data."""

    patch: int
    uv: np.ndarray  # (2,)
    point: np.ndarray  # (3,)
    jacobian: np.ndarray  # (3, 2)
    metric: np.ndarray  # (2, 2)


def metric_tensor(jacobian: np.ndarray) -> np.ndarray:
    """First fundamental form J^T J of a (3, 2) Jacobian; symmetric PSD."""
    j = np.asarray(jacobian, dtype=np.float64)
    return j.T @ j


def decode_batch_with_jacobian(
    model: AtlasModel, patch: int, uv: np.ndarray, code: np.ndarray
):
    """Points, Jacobians and metrics for many UVs of one patch.

    `uv` is (2, m); returns (points (3, m), jacobians (m, 3, 2),
    metrics (m, 2, 2)). Jacobians come from the forward-mode sweep of a
    throwaway tape, metrics as J^T J per column.
    """
    tape = Tape()
    leaves = model.bind(tape)
    uv_node = tape.const(np.asarray(uv, dtype=np.float64))
    code_node = tape.const(np.asarray(code, dtype=np.float64))
    out = model.decode(tape, leaves, patch, uv_node, code_node)
    ju, jv = tape.jacobian(out, uv_node)
    m = uv.shape[1]
    jac = np.empty((m, 3, 2))
    jac[:, :, 0] = ju.value.T
    jac[:, :, 1] = jv.value.T
    metrics = np.einsum("mdi,mdj->mij", jac, jac)
    return out.value.copy(), jac, metrics


def decode_with_jacobian(
    model: AtlasModel, patch: int, uv: np.ndarray, code: np.ndarray
) -> SurfaceSample:
    """Single-sample variant of :func:`decode_batch_with_jacobian`."""
    uv = np.asarray(uv, dtype=np.float64).reshape(2, 1)
    pts, jac, mets = decode_batch_with_jacobian(model, patch, uv, code)
    return SurfaceSample(
        patch=patch,
        uv=uv[:, 0].copy(),
        point=pts[:, 0].copy(),
        jacobian=jac[0],
        metric=mets[0],
    )
