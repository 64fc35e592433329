"""Per-few-class composition sub-modules and their training loop.

Each few class owns a 2-layer sub-module that maps the flattened reduced
classifiers of the class and its neighbors to a coefficient vector. The
coefficients are normalized to unit absolute sum, clamped (the original
classifier's coefficient capped from above, neighbor coefficients floored
from below), and then used to linearly combine the original full-dimension
classifiers and biases into a replacement classifier. Training minimizes
softmax cross-entropy over all N classes on batches that balance few and
base samples; base classifiers stay frozen throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ClassifierBank,
    ComposedBank,
    FeatureDataset,
    SplitSpec,
    _read_manifest,
    _tensor_name,
    _write_manifest,
    read_tensor,
    write_tensor,
)
from .errors import ConfigError, IntegrityError, ShapeError
from .neighbors import (
    NeighborSet,
    base_distances,
    build_neighbor_set,
    class_means,
    pca_fit,
)
from .numerics import (
    GradTape,
    Node,
    abs_normalize,
    affine,
    cap_floor_clamp,
    leaky_relu,
    sgd_momentum_step,
)

STAGES = ("raw", "normalized", "clamped")


@dataclass(frozen=True)
class AlphaVector:
    """Composition coefficients at a known pipeline stage.

    The stages form a fixed pipeline, each applied exactly once per forward
    pass: raw -> normalized -> clamped -> composed.
    """

    values: np.ndarray
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown alpha stage {self.stage!r}")

    def _require(self, stage: str) -> None:
        if self.stage != stage:
            raise ValueError(f"expected {stage} alphas, got {self.stage}")


def raw_alpha(values) -> AlphaVector:
    return AlphaVector(values=np.asarray(values, dtype=np.float64), stage="raw")


def normalize_alpha(a: AlphaVector, strict: bool = True) -> AlphaVector:
    """Divide by the absolute sum so sum(|alpha|) == 1; signs preserved."""
    a._require("raw")
    return AlphaVector(values=abs_normalize(a.values, strict=strict), stage="normalized")


def clamp_alpha(a: AlphaVector, gamma: float, k: int | None = None) -> AlphaVector:
    """Cap |alpha_0| at gamma and floor |alpha_1..k| at (1-gamma)/k.

    No renormalization afterward: the clamped vector feeds composition
    directly, so its absolute sum may differ from 1.
    """
    a._require("normalized")
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must be in (0, 1], got {gamma}")
    n = a.values.shape[0]
    if k is None:
        k = n - 1
    elif k != n - 1:
        raise ShapeError(f"alpha vector of length {n} disagrees with k={k}")
    floor = (1.0 - gamma) / k if k > 0 else 0.0
    return AlphaVector(values=cap_floor_clamp(a.values, gamma, floor), stage="clamped")


def compose(a: AlphaVector, nb: NeighborSet) -> tuple[np.ndarray, float]:
    """Alpha-weighted sums of the full-dimension classifiers and biases."""
    a._require("clamped")
    if a.values.shape[0] != nb.k + 1:
        raise ShapeError(
            f"alpha vector of length {a.values.shape[0]} vs neighbor set of size {nb.k + 1}"
        )
    return a.values @ nb.full_rows, float(a.values @ nb.biases)


def score_batch(features: np.ndarray, bank: ClassifierBank) -> np.ndarray:
    """Score every sample against every class of the (composed) bank."""
    return bank.scores(features)


# ---------------------------------------------------------------------------
# Sub-modules


@dataclass
class SubModule:
    """2-layer network emitting one coefficient per input classifier."""

    fc1_w: np.ndarray  # (hidden, (k+1)*d)
    fc1_b: np.ndarray  # (hidden,)
    fc2_w: np.ndarray  # (k+1, hidden)
    fc2_b: np.ndarray  # (k+1,)

    def params(self) -> list[np.ndarray]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def copy(self) -> "SubModule":
        return SubModule(*(p.copy() for p in self.params()))


def init_submodule(
    rng: np.random.Generator,
    in_dim: int,
    hidden: int,
    n_out: int,
    gamma: float,
    init_gain: float = 2.5,
    init_margin: float = 0.05,
) -> SubModule:
    """Uniform +-1/sqrt(fan-in) weights; the output bias points the initial
    coefficients at [~gamma, ~(1-gamma)/k, ...] so training starts near the
    original weak classifier but strictly inside the clamp region."""
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = 1.0 / np.sqrt(hidden)
    fc1_w = rng.uniform(-s1, s1, size=(hidden, in_dim))
    fc1_b = rng.uniform(-s1, s1, size=hidden)
    fc2_w = rng.uniform(-s2, s2, size=(n_out, hidden))
    if n_out > 1:
        a0 = gamma - init_margin * (gamma - 1.0 / n_out)
        target = np.full(n_out, (1.0 - a0) / (n_out - 1))
        target[0] = a0
    else:
        target = np.ones(1)
    # Normalization is scale-invariant, so the gain only outweighs the
    # fc2-weight contribution without changing the target direction.
    fc2_b = init_gain * target
    return SubModule(fc1_w=fc1_w, fc1_b=fc1_b, fc2_w=fc2_w, fc2_b=fc2_b)


def submodule_forward(sub: SubModule, input_vec: np.ndarray, slope: float) -> AlphaVector:
    """fc1 -> leaky relu -> fc2, producing raw coefficients."""
    hidden = leaky_relu(affine(sub.fc1_w, np.asarray(input_vec, dtype=np.float64), sub.fc1_b), slope)
    return raw_alpha(affine(sub.fc2_w, hidden, sub.fc2_b))


# ---------------------------------------------------------------------------
# The full model


@dataclass
class AlphaModel:
    """All sub-modules plus the frozen inputs they operate on."""

    gamma: float
    top_k: int
    reduced_dim: int
    hidden: int
    slope: float
    neighbor_sets: list[NeighborSet]
    submodules: list[SubModule]
    bank: ClassifierBank
    strict_alpha: bool = False

    def __post_init__(self):
        few = self.bank.split.few_ids
        if len(self.neighbor_sets) != len(few) or len(self.submodules) != len(few):
            raise IntegrityError(
                f"model needs one sub-module and neighbor set per few class "
                f"({len(few)}), got {len(self.submodules)} and {len(self.neighbor_sets)}"
            )
        for ns, target in zip(self.neighbor_sets, few):
            if ns.target != target:
                raise IntegrityError(
                    f"neighbor set for class {ns.target} out of order (expected {target})"
                )

    @property
    def few_ids(self) -> tuple[int, ...]:
        return self.bank.split.few_ids

    def parameters(self) -> list[np.ndarray]:
        return [p for sub in self.submodules for p in sub.params()]

    def snapshot(self) -> list[SubModule]:
        return [sub.copy() for sub in self.submodules]


def build_model(
    bank: ClassifierBank,
    ds: FeatureDataset,
    gamma: float = 0.6,
    top_k: int = 5,
    reduced_dim: int = 8,
    hidden: int | None = None,
    slope: float = 0.01,
    seed: int = 0,
    strict_alpha: bool = False,
    init_gain: float = 2.5,
    init_margin: float = 0.05,
) -> AlphaModel:
    """Select neighbors from class mean features, fit one shared PCA on the
    bank's weight rows, and initialize a sub-module per few class."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must be in (0, 1], got {gamma}")
    split = bank.split
    if top_k > split.n_base:
        raise ConfigError(f"top_k {top_k} exceeds number of base classes {split.n_base}")
    if hidden is None:
        hidden = reduced_dim
    if bank.feature_dim != ds.feature_dim:
        raise ConfigError(
            f"bank dim {bank.feature_dim} does not match dataset dim {ds.feature_dim}"
        )
    means = class_means(ds)
    proj = pca_fit(bank.weights, reduced_dim)
    sets, subs = [], []
    rng = np.random.default_rng(seed)
    for target in split.few_ids:
        ranked = base_distances(means, split, target)[:top_k]
        ns = build_neighbor_set(
            bank,
            proj,
            ids=[c for _, c in ranked],
            target=target,
            distances=[dist for dist, _ in ranked],
        )
        sets.append(ns)
        subs.append(
            init_submodule(
                rng,
                in_dim=(top_k + 1) * reduced_dim,
                hidden=hidden,
                n_out=top_k + 1,
                gamma=gamma,
                init_gain=init_gain,
                init_margin=init_margin,
            )
        )
    return AlphaModel(
        gamma=gamma,
        top_k=top_k,
        reduced_dim=reduced_dim,
        hidden=hidden,
        slope=slope,
        neighbor_sets=sets,
        submodules=subs,
        bank=bank,
        strict_alpha=strict_alpha,
    )


def alpha_pipeline(model: AlphaModel, index: int) -> AlphaVector:
    """Run one sub-module through the full raw -> normalized -> clamped chain."""
    ns = model.neighbor_sets[index]
    a = submodule_forward(model.submodules[index], ns.flat_input, model.slope)
    a = normalize_alpha(a, strict=model.strict_alpha)
    return clamp_alpha(a, model.gamma)


def export_composed(model: AlphaModel, bank: ClassifierBank | None = None) -> ComposedBank:
    """Deterministic forward pass per few class; base rows copied verbatim."""
    if bank is None:
        bank = model.bank
    weights = bank.weights.copy()
    biases = bank.biases.copy()
    for i, ns in enumerate(model.neighbor_sets):
        u, t = compose(alpha_pipeline(model, i), ns)
        weights[ns.target] = u
        biases[ns.target] = t
    return ComposedBank(
        weights=weights,
        biases=biases,
        split=bank.split,
        provenance=f"composed(gamma={model.gamma:g}, k={model.top_k}) from [{bank.provenance}]",
    )


# ---------------------------------------------------------------------------
# Loss and gradients (tape path)


def _tape_alpha(model: AlphaModel, tape: GradTape, nodes: list[Node], index: int) -> Node:
    ns = model.neighbor_sets[index]
    fc1_w, fc1_b, fc2_w, fc2_b = nodes
    h = tape.leaky_relu(tape.affine(fc1_w, ns.flat_input, fc1_b), model.slope)
    raw = tape.affine(fc2_w, h, fc2_b)
    norm = tape.abs_normalize(raw, strict=model.strict_alpha)
    k = ns.k
    floor = (1.0 - model.gamma) / k if k > 0 else 0.0
    return tape.cap_floor_clamp(norm, model.gamma, floor)


def loss_and_grads(
    model: AlphaModel, features: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch plus gradients for every sub-module
    parameter, in `model.parameters()` order.

    Gradients flow through scoring, composition, clamping (zero on clamped
    coordinates) and normalization back into both layers; base-class scores
    enter the softmax but their classifiers are frozen constants.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError(f"batch features must be 2-D and nonempty, got {features.shape}")
    tape = GradTape()
    param_nodes = [[Node(p) for p in sub.params()] for sub in model.submodules]
    u_nodes, t_nodes = [], []
    for i, ns in enumerate(model.neighbor_sets):
        a = _tape_alpha(model, tape, param_nodes[i], i)
        u_nodes.append(tape.linear_mix(a, ns.full_rows))
        t_nodes.append(tape.linear_mix(a, ns.biases))
    u = tape.stack(u_nodes)
    t = tape.stack(t_nodes)
    few_scores = tape.batch_scores(features, u, t)
    scores = tape.overwrite_columns(model.bank.scores(features), few_scores, list(model.few_ids))
    loss = tape.mean_softmax_xent(scores, labels)
    tape.backward(loss)
    grads = [n.grad for nodes in param_nodes for n in nodes]
    return float(loss.value), grads


def flatten_params(model: AlphaModel) -> np.ndarray:
    return np.concatenate([p.ravel() for p in model.parameters()])


def set_params(model: AlphaModel, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    expected = sum(p.size for p in model.parameters())
    if flat.shape != (expected,):
        raise ShapeError(f"flat parameter vector {flat.shape} vs expected ({expected},)")
    offset = 0
    for p in model.parameters():
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size


# ---------------------------------------------------------------------------
# Training


def sample_epoch(ds: FeatureDataset, split: SplitSpec, rng: np.random.Generator) -> np.ndarray:
    """All few-class train samples plus an equal number of base samples drawn
    uniformly without replacement, shuffled. Redrawn every epoch."""
    train_idx = ds.indices("train")
    labels = ds.labels[train_idx]
    few = set(split.few_ids)
    is_few = np.isin(labels, list(few))
    few_idx = train_idx[is_few]
    base_idx = train_idx[~is_few]
    if base_idx.size < few_idx.size:
        raise ConfigError(
            f"need at least as many base train samples ({base_idx.size}) "
            f"as few train samples ({few_idx.size})"
        )
    picked = rng.choice(base_idx, size=few_idx.size, replace=False)
    epoch = np.concatenate([few_idx, picked])
    rng.shuffle(epoch)
    return epoch


@dataclass
class TrainState:
    """Mutable loop state: schedule position, momentum buffers, best snapshot."""

    epoch: int
    velocities: list[np.ndarray]
    best_few_top1: float
    best_epoch: int
    best_params: list[SubModule]

    def lr(self, lr0: float) -> float:
        return lr0 * 0.1 ** (self.epoch // 20)


@dataclass
class FitResult:
    model: AlphaModel
    log: list[dict]
    best_epoch: int
    best_few_top1: float


def fit(
    model: AlphaModel,
    ds: FeatureDataset,
    epochs: int = 100,
    lr0: float = 0.1,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
    weight_decay: float = 0.0,
    on_epoch=None,
) -> FitResult:
    """Train the sub-modules and return the epoch snapshot with the best
    few-split validation top-1 (ties keep the earlier epoch).

    The learning rate decays by 0.1 every 20 epochs. The per-epoch log
    records mean training loss, the learning rate, and validation top-1/top-5
    for each split.
    """
    from .reports import split_report

    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    rng = np.random.default_rng(seed)
    split = model.bank.split
    val_x, val_y = ds.partition_arrays("val")
    state = TrainState(
        epoch=0,
        velocities=[np.zeros_like(p) for p in model.parameters()],
        best_few_top1=-np.inf,
        best_epoch=-1,
        best_params=model.snapshot(),
    )
    log: list[dict] = []

    for epoch in range(epochs):
        state.epoch = epoch
        lr = state.lr(lr0)
        order = sample_epoch(ds, split, rng)
        loss_sum = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start : start + batch_size]
            loss, grads = loss_and_grads(model, ds.features[batch], ds.labels[batch])
            loss_sum += loss * batch.size
            for param, grad, vel in zip(model.parameters(), grads, state.velocities):
                if weight_decay:
                    grad = grad + weight_decay * param
                sgd_momentum_step(param, grad, vel, lr, momentum)
        report = split_report(score_batch(val_x, export_composed(model)), val_y, split)
        few = report.accuracy("few")
        entry = {
            "epoch": epoch,
            "loss": loss_sum / order.size,
            "lr": lr,
            "val": report.to_dict(),
        }
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if few is not None and few.top1 > state.best_few_top1:
            state.best_few_top1 = few.top1
            state.best_epoch = epoch
            state.best_params = model.snapshot()

    best = AlphaModel(
        gamma=model.gamma,
        top_k=model.top_k,
        reduced_dim=model.reduced_dim,
        hidden=model.hidden,
        slope=model.slope,
        neighbor_sets=model.neighbor_sets,
        submodules=[sub.copy() for sub in state.best_params],
        bank=model.bank,
        strict_alpha=model.strict_alpha,
    )
    return FitResult(
        model=best,
        log=log,
        best_epoch=state.best_epoch,
        best_few_top1=state.best_few_top1,
    )


# ---------------------------------------------------------------------------
# Snapshot serialization


def save_model(path, model: AlphaModel) -> None:
    """Write the sub-module parameters and frozen neighbor inputs as a JSON
    manifest plus stacked 2-D tensor files alongside."""
    path = Path(path)
    tensors = {
        "fc1_w": np.concatenate([s.fc1_w for s in model.submodules]),
        "fc1_b": np.stack([s.fc1_b for s in model.submodules]),
        "fc2_w": np.concatenate([s.fc2_w for s in model.submodules]),
        "fc2_b": np.stack([s.fc2_b for s in model.submodules]),
        "reduced": np.concatenate([ns.reduced for ns in model.neighbor_sets]),
        "set_biases": np.stack([ns.biases for ns in model.neighbor_sets]),
        "full_rows": np.concatenate([ns.full_rows for ns in model.neighbor_sets]),
    }
    tensor_files = {}
    for key, arr in tensors.items():
        name = _tensor_name(path, key)
        write_tensor(path.parent / name, arr)
        tensor_files[key] = name
    _write_manifest(
        path,
        {
            "gamma": model.gamma,
            "top_k": model.top_k,
            "reduced_dim": model.reduced_dim,
            "hidden": model.hidden,
            "slope": model.slope,
            "strict_alpha": model.strict_alpha,
            "n_few": len(model.submodules),
            "few_ids": list(model.few_ids),
            "neighbors": [list(ns.neighbor_ids) for ns in model.neighbor_sets],
            "distances": [list(ns.distances) for ns in model.neighbor_sets],
            "tensor_files": tensor_files,
        },
    )


def load_model(path, bank: ClassifierBank) -> AlphaModel:
    """Inverse of `save_model`; the frozen bank is supplied by the caller."""
    path = Path(path)
    m = _read_manifest(path)
    try:
        f = int(m["n_few"])
        top_k = int(m["top_k"])
        hidden = int(m["hidden"])
        reduced_dim = int(m["reduced_dim"])
        arrays = {k: read_tensor(path.parent / v) for k, v in m["tensor_files"].items()}
        few_ids = [int(c) for c in m["few_ids"]]
        neighbors = [[int(c) for c in ids] for ids in m["neighbors"]]
        distances = [[float(x) for x in row] for row in m["distances"]]
    except KeyError as exc:
        raise IntegrityError(f"model manifest {path} missing field {exc}") from exc
    kp1 = top_k + 1
    if tuple(few_ids) != bank.split.few_ids:
        raise IntegrityError(
            f"model was built for few classes {few_ids}, bank has {list(bank.split.few_ids)}"
        )
    expected = {
        "fc1_w": (f * hidden, kp1 * reduced_dim),
        "fc1_b": (f, hidden),
        "fc2_w": (f * kp1, hidden),
        "fc2_b": (f, kp1),
        "reduced": (f * kp1, reduced_dim),
        "set_biases": (f, kp1),
        "full_rows": (f * kp1, bank.feature_dim),
    }
    for key, shape in expected.items():
        if arrays[key].shape != shape:
            raise IntegrityError(
                f"model tensor {key} has shape {arrays[key].shape}, expected {shape}"
            )
    subs, sets = [], []
    for i in range(f):
        subs.append(
            SubModule(
                fc1_w=arrays["fc1_w"][i * hidden : (i + 1) * hidden].copy(),
                fc1_b=arrays["fc1_b"][i].copy(),
                fc2_w=arrays["fc2_w"][i * kp1 : (i + 1) * kp1].copy(),
                fc2_b=arrays["fc2_b"][i].copy(),
            )
        )
        sets.append(
            NeighborSet(
                target=few_ids[i],
                neighbor_ids=tuple(neighbors[i]),
                reduced=arrays["reduced"][i * kp1 : (i + 1) * kp1].copy(),
                biases=arrays["set_biases"][i].copy(),
                full_rows=arrays["full_rows"][i * kp1 : (i + 1) * kp1].copy(),
                distances=tuple(distances[i]),
            )
        )
    return AlphaModel(
        gamma=float(m["gamma"]),
        top_k=top_k,
        reduced_dim=reduced_dim,
        hidden=hidden,
        slope=float(m["slope"]),
        neighbor_sets=sets,
        submodules=subs,
        bank=bank,
        strict_alpha=bool(m["strict_alpha"]),
    )


def write_train_log(path, log: list[dict]) -> None:
    """One JSON object per epoch, newline-delimited."""
    text = "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log)
    from .data import _atomic_write_bytes

    _atomic_write_bytes(path, text.encode("utf-8"))
