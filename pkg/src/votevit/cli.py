"""Command-line entry point covering the full experiment lifecycle.

Subcommands: gen-data, train, eval, ablate, report, attn.  Every run is
deterministic under fixed seeds, core artifacts are plain text (JSONL,
CSV, JSON), and the report subcommand additionally renders PNG figures.
Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

Config files are flat `key = value` text; `#` starts a comment and
unknown keys are errors.  The VOTEVIT_OUT environment variable supplies
the output directory when --out is omitted on directory-valued commands.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from collections import Counter

import numpy as np

from . import figures
from .data import (DatasetFormatError, GeneratorConfig, apply_kv,
                   generate_dataset, read_dataset, read_kv_file, split,
                   write_dataset)
from .losses import LabelError
from .metrics import MetricError
from .model import (ModelConfig, VotingVit, attention_map, config_from_kv)
from .tensor import ConfigError, NumericOverflowError, Rng, Tensor
from .train import (DEFAULT_ABLATION_TRIPLES, TrainConfig, TrainingDiverged,
                    evaluate, evaluate_with_votes, read_ablation_csv,
                    read_loss_csv, run_ablation, train, write_ablation_csv,
                    write_loss_csv)

OUT_ENV_VAR = "VOTEVIT_OUT"

MANIFEST_ROLES = ("train", "val", "test")


def _load_model_config(path) -> ModelConfig:
    return config_from_kv(read_kv_file(path)) if path else ModelConfig()


def _load_train_config(path) -> TrainConfig:
    tc = TrainConfig()
    if path:
        apply_kv(tc, read_kv_file(path), "train")
    tc.validate()
    return tc


def _resolve_out_dir(out) -> str:
    out = out or os.environ.get(OUT_ENV_VAR)
    if not out:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV_VAR}")
    os.makedirs(out, exist_ok=True)
    return out


# -- split manifest ------------------------------------------------------


def write_split_manifest(path, train_set, val_set, test_set) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,role\n")
        for role, part in (("train", train_set), ("val", val_set),
                           ("test", test_set)):
            for s in part:
                fh.write(f"{s.id},{role}\n")


def read_split_manifest(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "id,role":
        raise ConfigError(f"{path}: not a split manifest (expected id,role header)")
    roles: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        sample_id, sep, role = line.partition(",")
        if not sep or role not in MANIFEST_ROLES:
            raise ConfigError(f"{path}:{lineno}: expected id,{'|'.join(MANIFEST_ROLES)}")
        roles[sample_id] = role
    return roles


def _select_samples(samples, manifest_path, role):
    if manifest_path is None:
        return samples
    roles = read_split_manifest(manifest_path)
    chosen = [s for s in samples if roles.get(s.id) == role]
    if not chosen:
        raise ConfigError(f"no samples with role '{role}' in {manifest_path}")
    return chosen


# -- subcommands ---------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig()
    if args.config:
        apply_kv(cfg, read_kv_file(args.config), "generator")
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    samples = generate_dataset(cfg)
    shape = (cfg.image_channels, cfg.image_size, cfg.image_size)
    write_dataset(args.out, samples, image_shape=shape)
    print(f"wrote {len(samples)} samples to {args.out}")
    if samples:
        pos = sum(s.hard_label for s in samples)
        hist = Counter(len(s.rater_votes) for s in samples)
        print(f"positive rate: {pos / len(samples):.4f}")
        print("rater histogram: "
              + "  ".join(f"{k} raters: {v}" for k, v in sorted(hist.items())))
    return 0


def cmd_train(args) -> int:
    samples = read_dataset(args.data)
    mc = _load_model_config(args.model_config)
    tc = _load_train_config(args.train_config)
    out_dir = _resolve_out_dir(args.out)
    train_set, val_set, test_set = split(samples, tc.train_frac, tc.val_frac,
                                         tc.seed)
    result = train(mc, tc, train_set, val_set)
    ckpt = os.path.join(out_dir, "checkpoint.json")
    result.model.save(ckpt)
    write_loss_csv(os.path.join(out_dir, "loss_log.csv"), result.history)
    write_split_manifest(os.path.join(out_dir, "split.csv"),
                         train_set, val_set, test_set)
    if math.isfinite(result.best_val_brier):
        print(f"best epoch {result.best_epoch}, "
              f"val brier {result.best_val_brier:.6f}")
    else:
        print("no validation split; kept final-epoch parameters")
    print(f"artifacts: {ckpt}, loss_log.csv, split.csv")
    return 0


def _write_report_files(report, out_dir) -> list[str]:
    report.write_json(os.path.join(out_dir, "metrics.json"))
    report.write_reliability_csv(os.path.join(out_dir, "reliability.csv"))
    report.write_roc_csv(os.path.join(out_dir, "roc.csv"))
    return ["metrics.json", "reliability.csv", "roc.csv"]


def cmd_eval(args) -> int:
    model = VotingVit.load(args.checkpoint)
    samples = _select_samples(read_dataset(args.data), args.manifest, args.role)
    out_dir = _resolve_out_dir(args.out)
    rng = Rng(args.seed).child("eval")
    _, report = evaluate(model, samples, rng, args.bins, args.threshold)
    _write_report_files(report, out_dir)
    print("  ".join(f"{key} {value:.4f}"
                    for key, value in report.scalars().items()))
    return 0


def cmd_ablate(args) -> int:
    samples = read_dataset(args.data)
    mc = _load_model_config(args.model_config)
    tc = _load_train_config(args.train_config)
    out_dir = _resolve_out_dir(args.out)
    try:
        seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, "
                          f"got '{args.seeds}'") from None
    triples = DEFAULT_ABLATION_TRIPLES
    if args.triple:
        triples = tuple(_parse_triple(raw) for raw in args.triple)
    rows = run_ablation(samples, mc, tc, seeds, triples, args.bins,
                        args.threshold, max_workers=args.workers)
    path = os.path.join(out_dir, "ablation.csv")
    write_ablation_csv(path, rows)
    print("B V M  " + "  ".join(f"{k:>7s}" for k in
                                ("auroc", "brier", "ece", "recall", "f1", "acc")))
    for row in rows:
        flags = f"{int(row.use_binocular)} {int(row.use_voting)} {int(row.use_metadata)}"
        vals = "  ".join(f"{row.means[k]:7.4f}" for k in
                         ("auroc", "brier", "ece", "recall", "f1", "acc"))
        print(f"{flags}  {vals}")
    print(f"wrote {path}")
    return 0


def _parse_triple(raw: str) -> tuple[bool, bool, bool]:
    tokens = [tok.strip() for tok in raw.split(",")]
    if len(tokens) != 3 or any(tok not in ("0", "1") for tok in tokens):
        raise ConfigError(f"--triple expects B,V,M as 0/1 flags, got '{raw}'")
    return tuple(tok == "1" for tok in tokens)  # type: ignore[return-value]


def _find_sample(samples, sample_id: str):
    for s in samples:
        if s.id == sample_id:
            return s
    raise ConfigError(f"sample id '{sample_id}' not found")


def _attention_grid(model, sample, eye, block, seed):
    fellow = Tensor(sample.fellow_img) if model.config.use_binocular else None
    out = model.forward(Tensor(sample.target_img), fellow,
                        Rng(seed).child("attn"), train=False)
    grid = attention_map(out, block, eye).data
    if eye == "target":
        center, radius = sample.disc_center, sample.disc_radius
    else:
        center, radius = sample.fellow_disc_center, sample.fellow_disc_radius
    return grid, center, radius


def write_attention_csv(path, grid: np.ndarray, sample_id: str, eye: str,
                        block: int, center, radius: float,
                        patch_size: int) -> None:
    """Grid CSV with `#` comment lines carrying the overlay geometry."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# sample_id,{sample_id}\n")
        fh.write(f"# eye,{eye}\n")
        fh.write(f"# block,{block}\n")
        fh.write(f"# disc_center_row,{center[0]!r}\n")
        fh.write(f"# disc_center_col,{center[1]!r}\n")
        fh.write(f"# disc_radius,{radius!r}\n")
        fh.write(f"# patch_size,{patch_size}\n")
        for row in grid:
            fh.write(",".join(repr(v) for v in row.tolist()) + "\n")


def cmd_attn(args) -> int:
    model = VotingVit.load(args.checkpoint)
    samples = read_dataset(args.data)
    sample = _find_sample(samples, args.sample_id)
    block = args.block if args.block is not None \
        else model.config.num_cross_blocks - 1
    grid, center, radius = _attention_grid(model, sample, args.eye, block,
                                           args.seed)
    write_attention_csv(args.out, grid, sample.id, args.eye, block,
                        center, radius, model.config.patch_size)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} attention grid to {args.out}")
    return 0


def cmd_report(args) -> int:
    model = VotingVit.load(args.checkpoint)
    samples = _select_samples(read_dataset(args.data), args.manifest, args.role)
    out_dir = _resolve_out_dir(args.out)
    # same stream as `eval`, so the text artifacts come out byte-equal
    rng = Rng(args.seed).child("eval")
    _, report, vote_means, vote_stds = evaluate_with_votes(
        model, samples, rng, args.bins, args.threshold)
    written = _write_report_files(report, out_dir)
    figures.save_reliability_diagram(report.reliability_points,
                                     os.path.join(out_dir, "reliability.png"),
                                     args.bins)
    figures.save_roc_figure(report.roc_points, os.path.join(out_dir, "roc.png"),
                            report.auroc)
    figures.save_vote_histogram(vote_means, vote_stds,
                                os.path.join(out_dir, "votes.png"))
    written += ["reliability.png", "roc.png", "votes.png"]
    if args.loss_csv:
        figures.save_loss_curves(read_loss_csv(args.loss_csv),
                                 os.path.join(out_dir, "loss_curves.png"))
        written.append("loss_curves.png")
    if args.ablation:
        figures.save_ablation_bars(read_ablation_csv(args.ablation),
                                   os.path.join(out_dir, "ablation.png"))
        written.append("ablation.png")
    if args.sample_id:
        sample = _find_sample(samples, args.sample_id)
        block = args.block if args.block is not None \
            else model.config.num_cross_blocks - 1
        grid, center, radius = _attention_grid(model, sample, args.eye, block,
                                               args.seed)
        image = sample.target_img if args.eye == "target" else sample.fellow_img
        figures.save_attention_overlay(
            grid, image, center, radius,
            os.path.join(out_dir, "attention.png"),
            title=f"fusion attention over {args.eye} eye (block {block})")
        written.append("attention.png")
    print("  ".join(f"{key} {value:.4f}"
                    for key, value in report.scalars().items()))
    print(f"report written to {out_dir}: {', '.join(written)}")
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="votevit",
        description="Binocular voting ViT: data generation, training, "
                    "calibration evaluation, ablation, figures.",
        epilog=f"Set {OUT_ENV_VAR} to supply a default --out directory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (JSONL)")
    p.add_argument("--config", help="generator config key-value file")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--model-config", help="model config key-value file")
    p.add_argument("--train-config", help="training config key-value file")
    p.add_argument("--out", help="output directory (checkpoint, loss log, split)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (metrics + curves)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--bins", type=int, default=10, help="calibration bins")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="positive-class decision threshold")
    p.add_argument("--seed", type=int, default=0, help="vote sampling seed")
    p.add_argument("--manifest", help="split manifest csv to filter by role")
    p.add_argument("--role", choices=MANIFEST_ROLES, default="test",
                   help="role to keep when --manifest is given")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="retrain across the feature-switch grid")
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model-config", help="model config key-value file")
    p.add_argument("--train-config", help="training config key-value file")
    p.add_argument("--triple", action="append",
                   help="B,V,M row as 0/1 flags; repeatable; default: the "
                        "four standard rows")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1,
                   help="parallel training processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="evaluate and render PNG figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0, help="vote sampling seed")
    p.add_argument("--manifest", help="split manifest csv to filter by role")
    p.add_argument("--role", choices=MANIFEST_ROLES, default="test")
    p.add_argument("--loss-csv", help="loss log to render as loss_curves.png")
    p.add_argument("--ablation", help="ablation csv to render as ablation.png")
    p.add_argument("--sample-id", help="also render this sample's attention map")
    p.add_argument("--block", type=int, help="fusion block (default: last)")
    p.add_argument("--eye", choices=("target", "fellow"), default="target")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("attn", help="dump one sample's fusion attention grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--sample-id", required=True)
    p.add_argument("--block", type=int, help="fusion block (default: last)")
    p.add_argument("--eye", choices=("target", "fellow"), default="target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, MetricError, LabelError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NumericOverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
