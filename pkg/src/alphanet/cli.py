"""Subcommand front-end: datagen -> baseline -> train -> eval -> sweep.

Every command validates its configuration up front, writes outputs
atomically, and drops a `run.json` with the effective merged config, the
seed, a git-describe string (when available), and wall time. Exit codes:
1 configuration error, 2 file/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

from .config import RunConfig
from .data import (
    _atomic_write_bytes,
    load_bank,
    load_dataset,
    save_bank,
    save_dataset,
)
from .datagen import GenConfig, generate, train_baseline
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .model import save_model, write_train_log
from .neighbors import base_distances, class_means
from .reports import (
    classwise_report,
    gamma_sweep,
    run_training,
    split_report,
    topk_sweep,
    write_classwise_csv,
    write_split_report_csv,
    write_sweep_csv,
    write_sweep_svg,
)


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so main() controls the exit code."""

    def error(self, message):
        raise ConfigError(message)


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _write_run_json(out_dir: Path, command: str, config: dict, seed: int, t0: float) -> None:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "wall_time_s": round(time.monotonic() - t0, 3),
    }
    _atomic_write_bytes(out_dir / "run.json", (json.dumps(payload, indent=2) + "\n").encode("utf-8"))


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigError("--out-dir is required")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {p} must contain a JSON object")
    return d


def _numbers(text: str, cast):
    try:
        return [cast(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_grid(text: str, cast):
    """Either `lo:hi:step` (inclusive) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid must be lo:hi:step or a comma list, got {text!r}")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"grid bounds must be numbers, got {text!r}") from None
        if step <= 0 or hi < lo:
            raise ConfigError(f"grid needs step > 0 and hi >= lo, got {text!r}")
        values = []
        v = lo
        while v <= hi + 1e-9:
            values.append(cast(round(v, 12)))
            v += step
        return values
    values = _numbers(text, cast)
    if not values:
        raise ConfigError(f"grid is empty: {text!r}")
    return values


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file: {p}")
    return p


def _run_config(args) -> RunConfig:
    flag_values = {
        name: getattr(args, name)
        for name in RunConfig.field_names()
        if hasattr(args, name)
    }
    return RunConfig.merged(_load_json_config(args.config), flag_values)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config keys (flags override it)")
    p.add_argument("--dataset", help="dataset manifest path")
    p.add_argument("--bank", help="baseline classifier bank manifest path")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--gamma", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--reduced-dim", dest="reduced_dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--slope", type=float)
    p.add_argument("--lr0", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--many-gt", dest="many_gt", type=int)
    p.add_argument("--few-lt", dest="few_lt", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--strict-alpha", dest="strict_alpha", action=argparse.BooleanOptionalAction)
    p.add_argument("--init-gain", dest="init_gain", type=float)
    p.add_argument("--init-margin", dest="init_margin", type=float)


# ---------------------------------------------------------------------------
# Commands


def cmd_datagen(args) -> None:
    t0 = time.monotonic()
    values = _load_json_config(args.config)
    for name in (
        "n_classes", "feature_dim", "head_count", "tail_count", "n_groups",
        "val_per_class", "test_per_class", "many_gt", "few_lt", "seed",
    ):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    for name in ("decay_exponent", "sigma", "mean_scale", "group_spread"):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.rho is not None:
        rhos = _numbers(args.rho, float)
        values["rho"] = rhos[0] if len(rhos) == 1 else rhos
    if args.explicit_counts is not None:
        values["explicit_counts"] = _numbers(args.explicit_counts, int)
    cfg = GenConfig.from_dict(values)
    out = _out_dir(args)
    ds, split, _ = generate(cfg)
    save_dataset(out / "dataset.json", ds)
    counts = ds.train_counts()
    print(
        f"wrote {out / 'dataset.json'}: {ds.n_samples} samples, "
        f"{ds.n_classes} classes ({split.n_few} few), train counts "
        f"{int(counts.max())}..{int(counts.min())}"
    )
    _write_run_json(out, "datagen", cfg.to_dict(), cfg.seed, t0)


def cmd_baseline(args) -> None:
    t0 = time.monotonic()
    ds = load_dataset(_require_file(args.dataset, "--dataset"))
    out = _out_dir(args)
    bank = train_baseline(
        ds,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        batch_size=args.batch_size,
        momentum=args.momentum,
    )
    save_bank(out / "bank.json", bank)
    features, labels = ds.partition_arrays("val")
    report = split_report(bank.scores(features), labels, bank.split)
    line = ", ".join(
        f"{name} {acc.top1:.3f}"
        for name in ("few", "medium", "many", "all")
        if (acc := report.accuracy(name)) is not None
    )
    print(f"wrote {out / 'bank.json'}; val top-1: {line}")
    config = {
        "dataset": str(args.dataset),
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "momentum": args.momentum,
        "seed": args.seed,
    }
    _write_run_json(out, "baseline", config, args.seed, t0)


def cmd_train(args) -> None:
    t0 = time.monotonic()
    cfg = _run_config(args)
    ds = load_dataset(_require_file(cfg.dataset, "--dataset"))
    bank = load_bank(_require_file(cfg.bank, "--bank"))
    out = _out_dir(args)

    def show(entry: dict) -> None:
        few = entry["val"].get("few")
        few_txt = f" few-val {few['top1']:.4f}" if few else ""
        print(f"epoch {entry['epoch']:3d} loss {entry['loss']:.4f} lr {entry['lr']:g}{few_txt}")

    result, composed = run_training(bank, ds, cfg, on_epoch=show)
    save_model(out / "model.json", result.model)
    save_bank(out / "composed.json", composed)
    write_train_log(out / "train_log.jsonl", result.log)
    print(
        f"best epoch {result.best_epoch} (few-val top-1 {result.best_few_top1:.4f}); "
        f"wrote {out / 'model.json'}, {out / 'composed.json'}"
    )
    _write_run_json(out, "train", cfg.to_dict(), cfg.seed, t0)


def cmd_eval(args) -> None:
    t0 = time.monotonic()
    cfg = _run_config(args)
    ds = load_dataset(_require_file(cfg.dataset, "--dataset"))
    bank = load_bank(_require_file(cfg.bank, "--bank"))
    composed = load_bank(_require_file(args.composed, "--composed"))
    out = _out_dir(args)
    features, labels = ds.partition_arrays(args.partition)
    base_scores = bank.scores(features)
    comp_scores = composed.scores(features)
    report = split_report(comp_scores, labels, composed.split)
    means = class_means(ds)
    distances = {
        target: base_distances(means, bank.split, target)[0][0]
        for target in bank.split.few_ids
    }
    classwise = classwise_report(base_scores, comp_scores, labels, distances)
    write_split_report_csv(out / "split_report.csv", report)
    write_classwise_csv(out / "classwise.csv", classwise)
    summary = {
        "partition": args.partition,
        "baseline": split_report(base_scores, labels, bank.split).to_dict(),
        "composed": report.to_dict(),
        "spearman_distance_vs_delta": classwise.spearman,
    }
    _atomic_write_bytes(
        out / "eval.json", (json.dumps(summary, indent=2) + "\n").encode("utf-8")
    )
    line = ", ".join(
        f"{name} {acc.top1:.3f}"
        for name in ("few", "medium", "many", "all")
        if (acc := report.accuracy(name)) is not None
    )
    print(f"composed {args.partition} top-1: {line}")
    _write_run_json(out, "eval", cfg.to_dict() | {"partition": args.partition}, cfg.seed, t0)


def cmd_sweep(args) -> None:
    t0 = time.monotonic()
    cfg = _run_config(args)
    ds = load_dataset(_require_file(cfg.dataset, "--dataset"))
    bank = load_bank(_require_file(cfg.bank, "--bank"))
    out = _out_dir(args)
    if args.axis == "gamma":
        values = _parse_grid(args.grid, float)
        rows = gamma_sweep(bank, ds, cfg, values, partition=args.partition)
        x_label = "gamma"
    else:
        values = _parse_grid(args.grid, int)
        rows = topk_sweep(bank, ds, cfg, values, partition=args.partition)
        x_label = "top K"
    write_sweep_csv(out / "sweep.csv", rows)
    write_sweep_svg(
        out / "sweep.svg",
        rows,
        title=f"top-1 accuracy vs {x_label}",
        x_label=x_label,
    )
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} cells)")
    _write_run_json(
        out,
        "sweep",
        cfg.to_dict() | {"axis": args.axis, "grid": args.grid, "partition": args.partition},
        cfg.seed,
        t0,
    )


# ---------------------------------------------------------------------------
# Argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="alphanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic long-tailed feature dataset")
    p.add_argument("--config", help="JSON file with generator keys (flags override it)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--head-count", dest="head_count", type=int)
    p.add_argument("--tail-count", dest="tail_count", type=int)
    p.add_argument("--decay-exponent", dest="decay_exponent", type=float)
    p.add_argument("--explicit-counts", dest="explicit_counts", help="comma-separated per-class counts")
    p.add_argument("--sigma", type=float)
    p.add_argument("--rho", help="few-class mean overlap; one value or a comma list per few class")
    p.add_argument("--mean-scale", dest="mean_scale", type=float)
    p.add_argument("--n-groups", dest="n_groups", type=int)
    p.add_argument("--group-spread", dest="group_spread", type=float)
    p.add_argument("--val-per-class", dest="val_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--many-gt", dest="many_gt", type=int)
    p.add_argument("--few-lt", dest="few_lt", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("baseline", help="train the frozen per-class linear baseline bank")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train", help="train composition sub-modules against a frozen bank")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a composed bank and report per-split/per-class metrics")
    _add_run_flags(p)
    p.add_argument("--composed", help="composed bank manifest path")
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train once per grid value and tabulate accuracy")
    _add_run_flags(p)
    p.add_argument("--axis", choices=("gamma", "topk"), required=True)
    p.add_argument("--grid", required=True, help="lo:hi:step or comma-separated values")
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, IntegrityError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0
