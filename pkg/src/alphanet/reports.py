"""Split-wise accuracy metrics, per-class improvement tables, sweep drivers,
and CSV/SVG emission.

Score ties are broken by lower class id everywhere, which keeps every metric
deterministic. CSV files are the authoritative artifacts; the SVG charts are
rendered from the same rows by a small built-in emitter so no plotting
dependency is needed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .config import RunConfig
from .data import ClassifierBank, ComposedBank, FeatureDataset, _atomic_write_bytes
from .errors import ConfigError, ShapeError
from .model import AlphaModel, FitResult, build_model, export_composed, fit

REPORT_SPLITS = ("few", "medium", "many", "all")


def _check_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got {scores.shape}")
    if labels.shape != (scores.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    return scores, labels


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of samples whose label is among the k highest scores."""
    scores, labels = _check_scores(scores, labels)
    n_classes = scores.shape[1]
    if not 1 <= k <= n_classes:
        raise ConfigError(f"k={k} must be in [1, {n_classes}]")
    if labels.size == 0:
        raise ConfigError("topk_accuracy: empty batch")
    # Stable sort on negated scores: equal scores keep ascending class id.
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def top1_predictions(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, axis=1, kind="stable")[:, 0]


@dataclass(frozen=True)
class SplitAccuracy:
    top1: float
    top5: float
    n: int


@dataclass
class SplitReport:
    """Accuracy per split; splits with no samples are simply absent."""

    per_split: dict[str, SplitAccuracy]

    def accuracy(self, name: str) -> SplitAccuracy | None:
        return self.per_split.get(name)

    def to_dict(self) -> dict:
        return {
            name: {"top1": acc.top1, "top5": acc.top5, "n": acc.n}
            for name, acc in self.per_split.items()
        }


def split_report(scores: np.ndarray, labels: np.ndarray, split) -> SplitReport:
    """Top-1/top-5 per split plus the sample-weighted aggregate over all
    samples. Top-5 uses k = min(5, N) so tiny class counts stay legal."""
    scores, labels = _check_scores(scores, labels)
    k5 = min(5, scores.shape[1])
    per_split: dict[str, SplitAccuracy] = {}
    groups = [(name, np.isin(labels, split.ids_of(name))) for name in ("many", "medium", "few")]
    groups.append(("all", np.ones(labels.shape, dtype=bool)))
    for name, mask in groups:
        if not mask.any():
            continue
        per_split[name] = SplitAccuracy(
            top1=topk_accuracy(scores[mask], labels[mask], 1),
            top5=topk_accuracy(scores[mask], labels[mask], k5),
            n=int(mask.sum()),
        )
    return SplitReport(per_split=per_split)


# ---------------------------------------------------------------------------
# Per-class improvement vs neighbor distance


@dataclass(frozen=True)
class ClasswiseRow:
    class_id: int
    baseline_top1: float
    composed_top1: float
    delta: float
    nn_distance: float
    n: int


@dataclass
class ClasswiseReport:
    rows: list[ClasswiseRow]
    spearman: float | None

    def to_dict(self) -> dict:
        return {
            "rows": [dict(vars(r)) for r in self.rows],
            "spearman": self.spearman,
        }


def classwise_report(
    baseline_scores: np.ndarray,
    composed_scores: np.ndarray,
    labels: np.ndarray,
    distances: dict[int, float],
) -> ClasswiseReport:
    """Per-class top-1 before and after composition, with the rank
    correlation between nearest-neighbor distance and improvement.

    `distances` maps each class of interest to its nearest-neighbor
    distance; classes with no samples in `labels` are skipped. Correlation
    is Spearman (the claim being ordinal: closer neighbor, better
    improvement) and is absent when undefined (fewer than two classes or a
    constant column).
    """
    baseline_scores, labels = _check_scores(baseline_scores, labels)
    composed_scores, _ = _check_scores(composed_scores, labels)
    if baseline_scores.shape != composed_scores.shape:
        raise ShapeError(
            f"score matrices disagree: {baseline_scores.shape} vs {composed_scores.shape}"
        )
    base_pred = top1_predictions(baseline_scores)
    comp_pred = top1_predictions(composed_scores)
    rows = []
    for class_id in sorted(distances):
        mask = labels == class_id
        n = int(mask.sum())
        if n == 0:
            continue
        base_acc = float(np.mean(base_pred[mask] == class_id))
        comp_acc = float(np.mean(comp_pred[mask] == class_id))
        rows.append(
            ClasswiseRow(
                class_id=int(class_id),
                baseline_top1=base_acc,
                composed_top1=comp_acc,
                delta=comp_acc - base_acc,
                nn_distance=float(distances[class_id]),
                n=n,
            )
        )
    spearman = None
    if len(rows) >= 2:
        dist = np.array([r.nn_distance for r in rows])
        delta = np.array([r.delta for r in rows])
        if np.ptp(dist) > 0 and np.ptp(delta) > 0:
            rho = stats.spearmanr(dist, delta).statistic
            if np.isfinite(rho):
                spearman = float(rho)
    return ClasswiseReport(rows=rows, spearman=spearman)


def nn_distance_map(model: AlphaModel) -> dict[int, float]:
    """Nearest-neighbor distance per few class, from the stored neighbor sets."""
    out = {}
    for ns in model.neighbor_sets:
        if not ns.distances:
            raise ConfigError(
                f"neighbor set for class {ns.target} has no recorded distances"
            )
        out[ns.target] = ns.distances[0]
    return out


# ---------------------------------------------------------------------------
# Sweep drivers


def run_training(
    bank: ClassifierBank, ds: FeatureDataset, cfg: RunConfig, on_epoch=None
) -> tuple[FitResult, ComposedBank]:
    """Build, train, and export under one config. The sweep cell primitive."""
    cfg.validate()
    model = build_model(
        bank,
        ds,
        gamma=cfg.gamma,
        top_k=cfg.top_k,
        reduced_dim=cfg.reduced_dim,
        hidden=cfg.hidden,
        slope=cfg.slope,
        seed=cfg.seed,
        strict_alpha=cfg.strict_alpha,
        init_gain=cfg.init_gain,
        init_margin=cfg.init_margin,
    )
    result = fit(
        model,
        ds,
        epochs=cfg.epochs,
        lr0=cfg.lr0,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        weight_decay=cfg.weight_decay,
        on_epoch=on_epoch,
    )
    return result, export_composed(result.model)


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    report: SplitReport


def _sweep_workers(n_cells: int) -> int:
    raw = os.environ.get("ALPHANET_THREADS", "")
    if not raw:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"ALPHANET_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"ALPHANET_THREADS must be >= 1, got {cap}")
    return max(1, min(cap, n_cells))


def _sweep(
    bank: ClassifierBank,
    ds: FeatureDataset,
    cfg: RunConfig,
    param: str,
    values,
    partition: str = "test",
) -> list[SweepRow]:
    features, labels = ds.partition_arrays(partition)
    configs = [replace(cfg, **{param: value}).validate() for value in values]

    def cell(c: RunConfig) -> SplitReport:
        _, composed = run_training(bank, ds, c)
        return split_report(composed.scores(features), labels, composed.split)

    workers = _sweep_workers(len(configs))
    if workers == 1:
        reports = [cell(c) for c in configs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(cell, configs))
    return [
        SweepRow(param=param, value=float(v), report=r)
        for v, r in zip(values, reports)
    ]


def gamma_sweep(
    bank: ClassifierBank,
    ds: FeatureDataset,
    cfg: RunConfig,
    gammas,
    partition: str = "test",
) -> list[SweepRow]:
    """One full train+eval per gamma value, shared data and seed."""
    for g in gammas:
        if not 0.0 < g <= 1.0:
            raise ConfigError(f"sweep gamma must be in (0, 1], got {g}")
    return _sweep(bank, ds, cfg, "gamma", list(gammas), partition)


def topk_sweep(
    bank: ClassifierBank,
    ds: FeatureDataset,
    cfg: RunConfig,
    ks,
    partition: str = "test",
) -> list[SweepRow]:
    """One full train+eval per neighbor count, shared data and seed."""
    for k in ks:
        if not 0 <= k <= bank.split.n_base:
            raise ConfigError(
                f"sweep k must be in [0, {bank.split.n_base}], got {k}"
            )
    return _sweep(bank, ds, cfg, "top_k", [int(k) for k in ks], partition)


# ---------------------------------------------------------------------------
# CSV emission (6 significant digits)


def _sig(x: float) -> str:
    return f"{x:.6g}"


def write_split_report_csv(path, report: SplitReport) -> None:
    lines = ["split,top1,top5,n"]
    for name in REPORT_SPLITS:
        acc = report.accuracy(name)
        if acc is not None:
            lines.append(f"{name},{_sig(acc.top1)},{_sig(acc.top5)},{acc.n}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_classwise_csv(path, report: ClasswiseReport) -> None:
    lines = ["class_id,baseline_top1,composed_top1,delta,nn_distance"]
    for r in report.rows:
        lines.append(
            f"{r.class_id},{_sig(r.baseline_top1)},{_sig(r.composed_top1)},"
            f"{_sig(r.delta)},{_sig(r.nn_distance)}"
        )
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    lines = ["param,split,top1,top5"]
    for row in rows:
        for name in REPORT_SPLITS:
            acc = row.report.accuracy(name)
            if acc is not None:
                lines.append(f"{_sig(row.value)},{name},{_sig(acc.top1)},{_sig(acc.top5)}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Minimal SVG line charts

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(
    xs,
    series: dict[str, list],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 640,
    height: int = 420,
) -> str:
    """Axes, one polyline per series, and a legend. Missing values (None)
    are skipped. Returns the SVG document as a string."""
    xs = [float(x) for x in xs]
    if not xs or not series:
        raise ConfigError("line_chart needs at least one x value and one series")
    left, right, top, bottom = 60.0, width - 150.0, 40.0, height - 50.0
    ys = [float(v) for vals in series.values() for v in vals if v is not None]
    if not ys:
        raise ConfigError("line_chart: all series are empty")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return left + (x - x_lo) / (x_hi - x_lo) * (right - left)

    def py(y: float) -> float:
        return bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{(left + right) / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{height - 10}" '
        f'text-anchor="middle">{x_label}</text>',
        f'<text x="15" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {(top + bottom) / 2:.1f})">{y_label}</text>',
    ]
    for i in range(5):
        fx = x_lo + i * (x_hi - x_lo) / 4
        fy = y_lo + i * (y_hi - y_lo) / 4
        parts.append(
            f'<line x1="{px(fx):.1f}" y1="{bottom}" x2="{px(fx):.1f}" '
            f'y2="{bottom + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{px(fx):.1f}" y="{bottom + 18}" text-anchor="middle">{fx:.3g}</text>'
        )
        parts.append(
            f'<line x1="{left - 4}" y1="{py(fy):.1f}" x2="{left}" '
            f'y2="{py(fy):.1f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{py(fy) + 4:.1f}" text-anchor="end">{fy:.3g}</text>'
        )
    for idx, (name, vals) in enumerate(series.items()):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = [
            f"{px(x):.1f},{py(float(v)):.1f}"
            for x, v in zip(xs, vals)
            if v is not None
        ]
        if pts:
            parts.append(
                f'<polyline points="{" ".join(pts)}" fill="none" '
                f'stroke="{color}" stroke-width="2"/>'
            )
        ly = top + 18 * idx
        parts.append(
            f'<rect x="{right + 12}" y="{ly}" width="12" height="12" fill="{color}"/>'
        )
        parts.append(f'<text x="{right + 30}" y="{ly + 10:.1f}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_sweep_svg(path, rows: list[SweepRow], title: str = "", x_label: str = "") -> None:
    xs = [row.value for row in rows]
    series = {}
    for name in REPORT_SPLITS:
        vals = [
            row.report.accuracy(name).top1 if row.report.accuracy(name) else None
            for row in rows
        ]
        if any(v is not None for v in vals):
            series[name] = vals
    svg = line_chart(xs, series, title=title, x_label=x_label, y_label="top-1 accuracy")
    _atomic_write_bytes(path, svg.encode("utf-8"))
