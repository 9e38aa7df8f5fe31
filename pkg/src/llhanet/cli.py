"""Command-line entry point: ``llha <subcommand> [--flags]``.

Subcommands: gen-data, train, eval, baseline, ablate, report.
A JSON config file may carry ``scene``, ``network`` and ``train`` sections;
explicit flags win over the file. ``LLHA_SEED`` overrides every seed.

Exit codes: 0 ok, 2 validation error, 3 degenerate data under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .blocks import ConfigurationError
from .evaluation import ablation_grid, evaluate, format_table, map_metric, prf, ransac_baseline
from .geometry import GeometryError, pose_error
from .network import PRESETS, CheckpointError, NetworkConfig, load_checkpoint, read_archive
from .scenes import DatasetParseError, SceneConfig, generate_dataset, import_external
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("llhanet.cli")

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE = 0, 2, 3
SEED_ENV = "LLHA_SEED"


class DegenerateDataError(RuntimeError):
    """Raised in ``--strict`` mode when any scene or batch was degenerate."""


# --- configuration -----------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    unknown = set(data) - {"scene", "network", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return data


def env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _overrides(args, mapping: dict) -> dict:
    return {field: getattr(args, flag) for flag, field in mapping.items() if getattr(args, flag, None) is not None}


def scene_config(args, cfg: dict) -> SceneConfig:
    base = SceneConfig.from_dict(cfg.get("scene", {}))
    return replace(base, **_overrides(args, {
        "correspondences": "n_correspondences",
        "outlier_ratio": "outlier_ratio",
        "noise": "pixel_noise_sigma",
        "max_rotation": "max_rotation_deg",
    })).validate()


def network_config(args, cfg: dict) -> NetworkConfig:
    base = PRESETS[args.preset] if getattr(args, "preset", None) else NetworkConfig()
    if "network" in cfg:
        base = NetworkConfig.from_dict({**base.to_dict(), **cfg["network"]})
    return base.validate()


def train_config(args, cfg: dict) -> TrainConfig:
    base = TrainConfig(**cfg.get("train", {}))
    base = replace(base, **_overrides(args, {
        "iters": "total_iters",
        "batch_size": "batch_size",
        "lr": "learning_rate",
        "eval_every": "eval_every",
    }))
    return replace(base, seed=env_seed(base.seed if args.seed is None else args.seed)).validate()


# --- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = env_seed(args.seed if args.seed is not None else 0)
    ds = generate_dataset(args.scenes, scene_config(args, cfg), seed=seed, path=args.out)
    print(f"wrote {len(ds)} scenes to {args.out} (seed {seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = import_external(args.data, args.format)
    val = import_external(args.val_data, args.format) if args.val_data else None
    net, tc = network_config(args, cfg), train_config(args, cfg)
    result = train(ds, net, tc, args.out, val_dataset=val)
    print(f"best validation F {result.best_val_f:.2f}; checkpoints in {args.out}")
    if args.strict and result.degenerate_solves:
        raise DegenerateDataError(f"{result.degenerate_solves} degenerate solves during training")
    return EXIT_OK


def _write(text: str, path) -> None:
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_eval(args) -> int:
    ds = import_external(args.data, args.format)
    model = load_checkpoint(args.checkpoint)
    expected = PRESETS[args.preset] if args.preset else None
    rep = evaluate(ds, model, checkpoint_config=model.config, expected_config=expected,
                   with_ransac=not args.no_ransac, ransac_iterations=args.ransac_iters,
                   seed=env_seed(args.seed))
    _write(rep.to_json(), args.out)
    print(rep.table())
    if args.strict and rep.low_confidence:
        raise DegenerateDataError(f"{rep.low_confidence} low-confidence pose estimates")
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = import_external(args.data, args.format)
    seed = env_seed(args.seed)
    decisions, labels, errors, low = [], [], [], 0
    for k, scene in enumerate(ds):
        d, pose, flag = ransac_baseline(scene.corr, args.iterations, args.threshold, seed=seed + k)
        low += int(flag)
        decisions.append(d)
        if scene.corr.labels is not None:
            labels.append(scene.corr.labels)
        if scene.corr.pose is not None:
            errors.append((180.0, 180.0) if pose is None else pose_error(pose, scene.corr.pose))
    out = {"scenes": len(ds), "low_confidence": low, "iterations": args.iterations,
           "threshold": args.threshold}
    if len(labels) == len(ds):
        out["precision"], out["recall"], out["f_score"] = prf(np.concatenate(decisions), np.concatenate(labels))
    if len(errors) == len(ds):
        out["map_at"] = {str(t): map_metric(errors, t) for t in (5, 10, 20)}
    _write(json.dumps(out, indent=2, sort_keys=True), args.out)
    if args.out is not None:
        print(json.dumps(out, sort_keys=True))
    if args.strict and low:
        raise DegenerateDataError(f"{low} low-confidence RANSAC fits")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    train_set = import_external(args.train_data, args.format)
    test_set = import_external(args.test_data, args.format)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    rows = ablation_grid(train_set, test_set, network_config(args, cfg), train_config(args, cfg),
                         axes, args.out)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation.json").write_text(json.dumps(rows, indent=2))
    print(format_table(rows))
    if args.strict and any("error" in r for r in rows):
        raise DegenerateDataError("at least one ablation cell failed")
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.eval:
        rep = json.loads(Path(args.eval).read_text())
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(["P", "R", "F"], [rep["precision"], rep["recall"], rep["f_score"]], color=["C0", "C1", "C2"])
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        fig.tight_layout()
        fig.savefig(out / "prf.png", dpi=120)
        plt.close(fig)
        written.append(out / "prf.png")
        modes = {m: v for m, v in rep.get("map_at", {}).items() if v is not None}
        if modes:
            fig, ax = plt.subplots(figsize=(5, 1 + 0.4 * len(modes)))
            ax.axis("off")
            thresholds = sorted({t for v in modes.values() for t in v}, key=int)
            cells = [[f"{modes[m][t]:.2f}" for t in thresholds] for m in modes]
            ax.table(cellText=cells, rowLabels=list(modes), colLabels=[f"mAP@{t}" for t in thresholds],
                     loc="center")
            fig.tight_layout()
            fig.savefig(out / "map_table.png", dpi=120)
            plt.close(fig)
            written.append(out / "map_table.png")
    if args.ablation:
        rows = [r for r in json.loads(Path(args.ablation).read_text()) if r.get("f_score") is not None]
        if rows:
            fig, ax = plt.subplots(figsize=(1 + 0.8 * len(rows), 3))
            ax.bar([r["config"] for r in rows], [r["f_score"] for r in rows])
            ax.set_ylabel("F (%)")
            fig.autofmt_xdate()
            fig.tight_layout()
            fig.savefig(out / "ablation_f.png", dpi=120)
            plt.close(fig)
            written.append(out / "ablation_f.png")
    if not written:
        raise ValueError("nothing to plot: pass --eval and/or --ablation")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest, tensors = read_archive(args.checkpoint)
    info = {k: v for k, v in manifest.items() if k != "tensors"}
    info["parameters"] = int(sum(t.numel() for t in tensors.values()))
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _add_data(p, name="--data"):
    p.add_argument(name, required=True, help="dataset file")
    p.add_argument("--format", default="llha-v1", help="dataset format id (llha-v1 or csv-corr)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llha", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--correspondences", type=int)
    p.add_argument("--outlier-ratio", type=float)
    p.add_argument("--noise", type=float, help="pixel noise sigma in normalized coordinates")
    p.add_argument("--max-rotation", type=float, help="degrees")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_data(p)
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--strict", action="store_true", help="degenerate solves are an error")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), help="refuse checkpoints of another config")
    p.add_argument("--no-ransac", action="store_true")
    p.add_argument("--ransac-iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--strict", action="store_true", help="low-confidence poses are an error")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="RANSAC-only baseline")
    _add_data(p)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="train and compare configuration cells")
    _add_data(p, "--train-data")
    p.add_argument("--test-data", required=True)
    p.add_argument("--axes", default="modules", help="comma-separated: modules, ends, pool or cell names")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plot evaluation and ablation results")
    p.add_argument("--eval", help="report JSON from 'eval'")
    p.add_argument("--ablation", help="ablation.json from 'ablate'")
    p.add_argument("--out", required=True, help="output directory for PNG files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


VALIDATION_ERRORS = (ValueError, ConfigurationError, CheckpointError, DatasetParseError, GeometryError,
                     TrainingError, FileNotFoundError, IsADirectoryError, TypeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except VALIDATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
