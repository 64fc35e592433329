"""Synthetic long-tailed feature datasets and a frozen baseline classifier.

The generator draws Gaussian clusters whose per-class train counts follow a
head-to-tail decay profile. A correlation knob `rho` pulls each few-class
mean toward a randomly chosen base-class mean, so tests can construct few
classes that do (or do not) have a semantically close strong neighbor. Base
means themselves are drawn around a handful of group centers (real label
spaces are clumpy: several strong classes resemble each other), which gives
a few class more than one informative neighbor. The baseline is a
multinomial logistic regression trained on the naturally imbalanced train
split; its few-class rows are genuinely weak, which is the precondition for
composition to have headroom.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import ClassifierBank, FeatureDataset, SplitSpec, assign_splits
from .errors import ConfigError, TrainingError
from .numerics import softmax


@dataclass
class GenConfig:
    """Knobs for the synthetic generator. Defaults are the desk-scale setup:
    50 classes at dim 16 with a decay profile leaving 10 few classes.

    `rho` may be a single fraction applied to every few class, or one value
    per few class (ascending class id) to mix close-neighbor and isolated
    few classes in one dataset. `n_groups` > 0 clusters the base-class means
    around that many shared centers (`group_spread` scales the within-group
    spread relative to `mean_scale`); 0 draws every mean independently.
    """

    n_classes: int = 50
    feature_dim: int = 16
    head_count: int = 200
    tail_count: int = 5
    decay_exponent: float = 1.6
    explicit_counts: list[int] | None = None
    sigma: float = 0.9
    rho: float | list[float] = 0.7
    mean_scale: float = 1.15
    n_groups: int = 0
    group_spread: float = 0.5
    val_per_class: int = 20
    test_per_class: int = 20
    many_gt: int = 100
    few_lt: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.tail_count < 2:
            raise ConfigError(f"tail_count must be >= 2, got {self.tail_count}")
        if self.head_count <= self.tail_count:
            raise ConfigError(
                f"head_count {self.head_count} must exceed tail_count {self.tail_count}"
            )
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.decay_exponent <= 0:
            raise ConfigError(f"decay_exponent must be positive, got {self.decay_exponent}")
        if self.val_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("val_per_class and test_per_class must be >= 1")
        if self.n_groups < 0:
            raise ConfigError(f"n_groups must be >= 0, got {self.n_groups}")
        if self.group_spread <= 0:
            raise ConfigError(f"group_spread must be positive, got {self.group_spread}")
        for r in np.atleast_1d(np.asarray(self.rho, dtype=np.float64)):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"rho values must lie in [0, 1], got {r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def count_profile(cfg: GenConfig) -> np.ndarray:
    """Per-class train counts, head first. Power-law interpolation between
    head_count and tail_count unless explicit counts are given."""
    if cfg.explicit_counts is not None:
        counts = np.asarray(cfg.explicit_counts, dtype=np.int64)
        if counts.shape != (cfg.n_classes,):
            raise ConfigError(
                f"explicit_counts has {counts.size} entries for {cfg.n_classes} classes"
            )
        if counts.min() < 1:
            raise ConfigError("explicit_counts must all be >= 1")
        return counts
    n = cfg.n_classes
    frac = (n - 1 - np.arange(n)) / (n - 1)
    counts = np.round(
        cfg.tail_count + (cfg.head_count - cfg.tail_count) * frac**cfg.decay_exponent
    ).astype(np.int64)
    return counts


def _few_rhos(cfg: GenConfig, n_few: int) -> np.ndarray:
    rho = np.asarray(cfg.rho, dtype=np.float64)
    if rho.ndim == 0:
        return np.full(n_few, float(rho))
    if rho.shape != (n_few,):
        raise ConfigError(
            f"rho list has {rho.size} entries but the profile yields {n_few} few classes"
        )
    return rho


def generate(cfg: GenConfig) -> tuple[FeatureDataset, SplitSpec, np.ndarray]:
    """Draw a dataset from the config. Returns (dataset, split, true class means).

    Train counts follow the decay profile; val and test are balanced per
    class. Fully deterministic given cfg.seed.
    """
    cfg.validate()
    counts = count_profile(cfg)
    split = assign_splits(counts, many_gt=cfg.many_gt, few_lt=cfg.few_lt)
    if split.n_few == 0:
        raise ConfigError(
            f"no class qualifies as few under threshold {cfg.few_lt}; "
            f"smallest count is {counts.min()}"
        )
    if split.n_base == 0:
        raise ConfigError("no class qualifies as base; adjust counts or thresholds")

    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n_classes, cfg.feature_dim
    means = rng.normal(0.0, cfg.mean_scale, size=(n, d))
    base_ids = np.asarray(split.base_ids)
    if cfg.n_groups > 0:
        # Base means clump around shared group centers; few-class fresh
        # components stay independent draws so rho=0 means no inheritance.
        centers = rng.normal(0.0, cfg.mean_scale, size=(cfg.n_groups, d))
        for j, c in enumerate(split.base_ids):
            means[c] = centers[j % cfg.n_groups] + cfg.group_spread * cfg.mean_scale * rng.normal(
                0.0, 1.0, size=d
            )
    rhos = _few_rhos(cfg, split.n_few)
    for rho, c in zip(rhos, split.few_ids):
        parent = int(rng.choice(base_ids))
        means[c] = rho * means[parent] + (1.0 - rho) * means[c]

    feats, labels, parts = [], [], []
    per_class = counts + cfg.val_per_class + cfg.test_per_class
    for c in range(n):
        m = int(per_class[c])
        feats.append(rng.normal(means[c], cfg.sigma, size=(m, d)))
        labels.append(np.full(m, c, dtype=np.int64))
        codes = np.empty(m, dtype=np.uint8)
        codes[: counts[c]] = 0
        codes[counts[c] : counts[c] + cfg.val_per_class] = 1
        codes[counts[c] + cfg.val_per_class :] = 2
        parts.append(codes)

    ds = FeatureDataset(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        partitions=np.concatenate(parts),
        n_classes=n,
    )
    return ds, split, means


def train_baseline(
    ds: FeatureDataset,
    epochs: int = 60,
    lr: float = 0.5,
    seed: int = 0,
    split: SplitSpec | None = None,
    batch_size: int = 64,
    momentum: float = 0.9,
) -> ClassifierBank:
    """Fit one linear classifier per class by softmax cross-entropy SGD over
    the naturally imbalanced train partition, then freeze it.

    Training on the imbalanced joint distribution leaves the few-class rows
    under-fit on purpose. Deterministic given the seed.
    """
    train_x, train_y = ds.partition_arrays("train")
    if train_x.shape[0] == 0:
        raise ConfigError("train partition is empty")
    if split is None:
        split = assign_splits(ds.train_counts())
    if split.n_classes != ds.n_classes:
        raise ConfigError(
            f"split has {split.n_classes} classes, dataset has {ds.n_classes}"
        )

    rng = np.random.default_rng(seed)
    n, d = ds.n_classes, ds.feature_dim
    weights = np.zeros((n, d))
    biases = np.zeros(n)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(biases)
    n_train = train_x.shape[0]

    for epoch in range(epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            x, y = train_x[idx], train_y[idx]
            probs = softmax(x @ weights.T + biases)
            picked = probs[np.arange(len(idx)), y]
            epoch_loss += float(-np.log(picked).sum())
            g = probs
            g[np.arange(len(idx)), y] -= 1.0
            g /= len(idx)
            vel_w *= momentum
            vel_w += g.T @ x
            vel_b *= momentum
            vel_b += g.sum(axis=0)
            weights -= lr * vel_w
            biases -= lr * vel_b
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"baseline training diverged at epoch {epoch}")

    return ClassifierBank(
        weights=weights,
        biases=biases,
        split=split,
        provenance=f"baseline-logreg seed {seed}",
    )
