"""Command-line surface.

Subcommands: synth, align, train, sweep-delta, eval, infer, export.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import load_checkpoint, save_checkpoint
from .data import align_sequence, load_sequence, save_sequence
from .errors import DataError, NumericalError
from .export import export_visualization
from .metrics import evaluate_protocol
from .model import AtlasModel, ModelConfig
from .correspondence import build_shared_samples, map_correspondence
from .synthetic import KINDS, generate_synthetic
from .training import TrainConfig, lr_at, train_sequence


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception, not sys.exit(2)."""

    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    """Flags that override the JSON config for training-style commands."""
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha-mc", type=float, default=None)
    p.add_argument("--strategy", choices=("neighbors", "random"), default=None)
    p.add_argument("--batch-pairs", type=int, default=None)
    p.add_argument("--uv-samples", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--patches", type=int, default=None)
    p.add_argument("--code-dim", type=int, default=None)
    p.add_argument("--encoder-widths", default=None, help="comma list, e.g. 64,128,1024")
    p.add_argument("--decoder-widths", default=None, help="comma list, e.g. 512,512,256")
    p.add_argument("--mesh-points", type=int, default=None)


def _build_parser() -> _Parser:
    parser = _Parser(prog="seqatlas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--points", type=int, default=800)
    p.add_argument("--amplitude", type=float, default=5.0)
    _add_common(p)

    p = sub.add_parser("align", help="remove per-frame vertical-axis rotation")
    p.add_argument("--data", required=True, help="directory or file of frames")
    p.add_argument("--resolution", type=float, default=1.0, help="angle grid, degrees")
    p.add_argument("--mesh-points", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("train", help="fit an atlas model to a sequence")
    p.add_argument("--data", required=True)
    _add_train_overrides(p)
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("sweep-delta", help="train and evaluate across pair windows")
    p.add_argument("--data", required=True)
    _add_train_overrides(p)
    p.add_argument("--deltas", default="1,2,3,4,5,6", help="comma list of windows")
    p.add_argument("--eval-pairs", type=int, default=100)
    p.add_argument("--eval-points", type=int, default=1000)
    _add_common(p)

    p = sub.add_parser("eval", help="run the correspondence protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--points", type=int, default=3125)
    p.add_argument("--mesh-points", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("infer", help="map one frame's points onto another frame")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--points", type=int, default=3125)
    p.add_argument("--mesh-points", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("export", help="write textured OBJ visualization")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=2500)
    p.add_argument("--mesh-points", type=int, default=None)
    _add_common(p)

    return parser


def _resolve_data(data: str, mesh_points, seed: int):
    """A --data argument names either one file or a directory of frames."""
    path = Path(data)
    if path.is_dir():
        files = sorted(
            f for f in path.iterdir() if f.suffix.lower() in (".ply", ".xyz", ".obj")
        )
        if not files:
            raise DataError(f"{data}: no .ply/.xyz/.obj frames found")
        ids_path = path / "ids.txt"
        return load_sequence(
            files,
            mesh_points=mesh_points,
            ids_path=ids_path if ids_path.exists() else None,
            seed=seed,
        )
    if not path.exists():
        raise DataError(f"{data}: no such file or directory")
    return load_sequence([path], mesh_points=mesh_points, seed=seed)


def _load_configs(args) -> tuple:
    """Config file + CLI overrides -> (TrainConfig, ModelConfig)."""
    blob = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise DataError(f"{args.config}: config file not found")
        try:
            blob = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON: {exc}") from None
    train_d = dict(blob.get("train", {}))
    model_d = dict(blob.get("model", {}))

    overrides = {
        "iterations": getattr(args, "iterations", None),
        "lr": getattr(args, "lr", None),
        "alpha_mc": getattr(args, "alpha_mc", None),
        "delta": getattr(args, "delta", None),
        "pair_strategy": getattr(args, "strategy", None),
        "batch_pairs": getattr(args, "batch_pairs", None),
        "uv_samples_per_frame": getattr(args, "uv_samples", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    for key, val in overrides.items():
        if val is not None:
            train_d[key] = val
    train_d.setdefault("seed", args.seed)
    if args.seed != 0:
        train_d["seed"] = args.seed

    m_over = {
        "num_patches": getattr(args, "patches", None),
        "code_dim": getattr(args, "code_dim", None),
    }
    for key, val in m_over.items():
        if val is not None:
            model_d[key] = val
    for key, arg in (
        ("encoder_widths", getattr(args, "encoder_widths", None)),
        ("decoder_hidden", getattr(args, "decoder_widths", None)),
    ):
        if arg is not None:
            try:
                model_d[key] = [int(w) for w in str(arg).split(",") if w]
            except ValueError:
                raise UsageError(f"bad width list {arg!r}") from None
    model_d.setdefault("num_patches", 10)
    model_d.setdefault("code_dim", 1024)
    model_d.setdefault("encoder_widths", [64, 128, 1024])
    model_d.setdefault("decoder_hidden", [512, 512, 256])

    try:
        return TrainConfig.from_dict(train_d), ModelConfig.from_dict(model_d)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _write_history_csv(path, history, config: TrainConfig) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "chamfer", "metric", "total", "lr"])
        for it, entry in enumerate(history):
            writer.writerow(
                [it, repr(entry.chamfer), repr(entry.metric), repr(entry.total),
                 repr(lr_at(it, config))]
            )


def _cmd_synth(args) -> int:
    seq = generate_synthetic(
        args.kind, args.frames, args.points, args.amplitude, seed=args.seed
    )
    out = Path(args.out_dir)
    save_sequence(seq, out)
    meta = dict(seq.metadata)
    meta.update({"frames": args.frames, "points": args.points})
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {len(seq)} frames to {out}")
    return 0


def _cmd_align(args) -> int:
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    aligned = align_sequence(seq, resolution_deg=args.resolution)
    out = Path(args.out_dir)
    save_sequence(aligned, out)
    (out / "meta.json").write_text(
        json.dumps({"align_angles": aligned.metadata["align_angles"],
                    "scale": aligned.metadata.get("scale", 1.0)}, indent=2)
    )
    print(f"aligned {len(seq)} frames; angles {aligned.metadata['align_angles']}")
    return 0


def _cmd_train(args) -> int:
    train_cfg, model_cfg = _load_configs(args)
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"

    def sink(model, state, iteration, rng_state):
        save_checkpoint(
            ckpt_path,
            model,
            train_config=train_cfg.to_dict(),
            opt_state=state,
            iteration=iteration,
            rng_state=rng_state,
        )

    model, history = train_sequence(
        seq.frames,
        train_cfg,
        model_config=model_cfg,
        checkpoint_sink=sink,
        log_every=args.log_every,
    )
    _write_history_csv(out / "loss.csv", history, train_cfg)
    (out / "train_config.json").write_text(
        json.dumps({"train": train_cfg.to_dict(), "model": model_cfg.to_dict()},
                   indent=2)
    )
    final = history[-1].total if history else float("nan")
    print(f"trained {train_cfg.iterations} iterations; final loss {final}")
    return 0


def _cmd_sweep_delta(args) -> int:
    train_cfg, model_cfg = _load_configs(args)
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    try:
        deltas = [int(d) for d in args.deltas.split(",") if d]
    except ValueError:
        raise UsageError(f"bad delta list {args.deltas!r}") from None
    if not deltas:
        raise UsageError("no delta values given")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in deltas:
        cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "delta": d,
                                     "seed": train_cfg.seed + d})
        model, _ = train_sequence(seq.frames, cfg, model_config=model_cfg)
        report = evaluate_protocol(
            seq, model, m_pairs=args.eval_pairs, n_points=args.eval_points,
            seed=cfg.seed, threads=args.threads,
        )
        rows.append((d, report))
        print(
            f"delta {d}: m_sl2 {report.m_sl2_mean:.6g} "
            f"m_r {report.m_r_mean:.6g} m_auc {report.m_auc_mean:.6g}"
        )
    with open(out / "sweep_delta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["delta", "m_sl2_mean", "m_sl2_std", "m_r_mean", "m_auc_mean", "cd"]
        )
        for d, rep in rows:
            writer.writerow(
                [d, repr(rep.m_sl2_mean), repr(rep.m_sl2_std),
                 repr(rep.m_r_mean), repr(rep.m_auc_mean), repr(rep.cd)]
            )
    (out / "sweep_delta.json").write_text(
        json.dumps({str(d): rep.to_dict() for d, rep in rows}, indent=2)
    )
    return 0


def _cmd_eval(args) -> int:
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    if seq.ids is None:
        raise DataError(
            "evaluation requires ground-truth correspondence ids "
            "(missing field: ids / ids.txt)"
        )
    model = load_checkpoint(args.checkpoint).to_model()
    report = evaluate_protocol(
        seq, model, m_pairs=args.pairs, n_points=args.points,
        seed=args.seed, threads=args.threads,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.csv_rows())
    print(
        f"m_sl2 {report.m_sl2_mean:.6g} +- {report.m_sl2_std:.3g} | "
        f"m_r {report.m_r_mean:.6g} | m_auc {report.m_auc_mean:.6g} | "
        f"cd {report.cd:.6g}"
    )
    return 0


def _cmd_infer(args) -> int:
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    k = len(seq.frames)
    if not (0 <= args.source < k and 0 <= args.target < k):
        raise DataError(f"frame indices out of range (sequence has {k} frames)")
    model = load_checkpoint(args.checkpoint).to_model()
    codes = [model.encode_np(f) for f in seq.frames]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xA71A5]))
    sets = build_shared_samples(
        model,
        [codes[args.source], codes[args.target]],
        args.points,
        rng,
        frame_indices=[args.source, args.target],
    )
    cmap = map_correspondence(
        seq.frames[args.source], seq.frames[args.target], sets[0], sets[1]
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"correspondence_{args.source}_to_{args.target}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_index", "target_index"])
        for s_idx, t_idx in enumerate(cmap.target_index):
            writer.writerow([s_idx, int(t_idx)])
    print(f"wrote {path}")
    return 0


def _cmd_export(args) -> int:
    seq = _resolve_data(args.data, args.mesh_points, args.seed)
    model = load_checkpoint(args.checkpoint).to_model()
    manifest = export_visualization(
        model, seq, args.samples, args.out_dir, seed=args.seed
    )
    print(f"wrote {len(manifest['objs'])} OBJ frames to {args.out_dir}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "align": _cmd_align,
    "train": _cmd_train,
    "sweep-delta": _cmd_sweep_delta,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
