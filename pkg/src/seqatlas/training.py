"""Optimization loop: Adam with milestone learning-rate decay.

Each iteration draws a batch of frame pairs, encodes the frames involved,
decodes both frames of every pair at a shared freshly-drawn UV sample set,
and takes one Adam step on the combined reconstruction + consistency
objective. Single-worker execution is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape
from .errors import NumericalError
from .model import AtlasModel, ModelConfig
from .objectives import LossBreakdown, total_loss_node
from .sampling import sample_training_pairs, sample_uv_uniform


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_pairs: int = 4
    iterations: int = 200000
    alpha_mc: float = 0.1
    delta: int = 1
    pair_strategy: str = "neighbors"
    uv_samples_per_frame: int = 2500
    milestones: tuple = (0.8, 0.9)
    seed: int = 0
    checkpoint_every: int = 0  # 0 means only on completion

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not all(0.0 < m < 1.0 for m in self.milestones):
            raise ValueError("milestones must lie strictly inside (0, 1)")
        if self.pair_strategy not in ("neighbors", "random"):
            raise ValueError(f"unknown pair strategy {self.pair_strategy!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_pairs": self.batch_pairs,
            "iterations": self.iterations,
            "alpha_mc": self.alpha_mc,
            "delta": self.delta,
            "pair_strategy": self.pair_strategy,
            "uv_samples_per_frame": self.uv_samples_per_frame,
            "milestones": list(self.milestones),
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(
            lr=float(d.get("lr", 0.001)),
            batch_pairs=int(d.get("batch_pairs", 4)),
            iterations=int(d.get("iterations", 200000)),
            alpha_mc=float(d.get("alpha_mc", 0.1)),
            delta=int(d.get("delta", 1)),
            pair_strategy=str(d.get("pair_strategy", "neighbors")),
            uv_samples_per_frame=int(d.get("uv_samples_per_frame", 2500)),
            milestones=tuple(float(m) for m in d.get("milestones", (0.8, 0.9))),
            seed=int(d.get("seed", 0)),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class OptimState:
    """Adam moments per parameter plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    current_lr: float = 0.0

    @classmethod
    def for_params(cls, params: dict) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_step(params: dict, grads: dict, state: OptimState, lr: float) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    state.current_lr = lr
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * np.square(g)
        mhat = m / (1.0 - BETA1**t)
        vhat = v / (1.0 - BETA2**t)
        p -= lr * mhat / (np.sqrt(vhat) + EPS)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based iteration index.

    Exactly three plateaus: lr until ceil(m0*T), lr/10 until ceil(m1*T),
    lr/100 afterwards.
    """
    t = config.iterations
    lr = config.lr
    for frac in sorted(config.milestones):
        if iteration >= int(np.ceil(frac * t)):
            lr /= 10.0
    return lr


def train_sequence(
    frames: list,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    model: AtlasModel | None = None,
    checkpoint_sink=None,
    log_every: int = 0,
):
    """Fit an atlas model to an ordered list of (3, n) point clouds.

    Returns (model, history) where history holds one LossBreakdown per
    iteration. `checkpoint_sink`, when given, is called as
    sink(model, opt_state, iteration, rng_state) at the configured cadence
    and once at the end.
    """
    config.validate()
    if len(frames) < 2:
        raise ValueError("training needs a sequence of at least two frames")
    frames = [np.ascontiguousarray(f, dtype=np.float64) for f in frames]
    if model is None:
        model = AtlasModel(model_config or ModelConfig(), seed=config.seed)
    rng = np.random.default_rng(config.seed)
    state = OptimState.for_params(model.params)
    state.current_lr = config.lr
    names = model.param_names()
    history: list[LossBreakdown] = []

    for it in range(config.iterations):
        pair_set = sample_training_pairs(
            len(frames), config.delta, config.pair_strategy, config.batch_pairs, rng
        )
        uv_sets = [
            sample_uv_uniform(config.uv_samples_per_frame, model.config.num_patches, rng)
            for _ in pair_set.pairs
        ]
        batch_frames = sorted({f for p in pair_set.pairs for f in p})
        try:
            tape = Tape()
            leaves = model.bind(tape)
            codes = {
                f: model.encode(tape, leaves, frames[f]) for f in batch_frames
            }
            clouds = {f: frames[f] for f in batch_frames}
            total, breakdown = total_loss_node(
                tape,
                model,
                leaves,
                codes,
                clouds,
                pair_set.pairs,
                uv_sets,
                config.alpha_mc,
            )
            grad_list = tape.grad(total, [leaves[n] for n in names])
        except NonFiniteError as exc:
            raise NumericalError(f"non-finite loss at iteration {it}: {exc}") from exc
        grads = dict(zip(names, grad_list))
        adam_step(model.params, grads, state, lr_at(it, config))
        history.append(breakdown)
        if log_every and (it + 1) % log_every == 0:
            print(
                f"iter {it + 1}/{config.iterations} "
                f"loss {breakdown.total:.6f} chamfer {breakdown.chamfer:.6f} "
                f"metric {breakdown.metric:.6f} lr {state.current_lr:g}"
            )
        if (
            checkpoint_sink is not None
            and config.checkpoint_every > 0
            and (it + 1) % config.checkpoint_every == 0
        ):
            checkpoint_sink(model, state, it + 1, rng.bit_generator.state)

    if checkpoint_sink is not None:
        checkpoint_sink(model, state, config.iterations, rng.bit_generator.state)
    return model, history
