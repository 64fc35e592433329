"""Dense float64 primitives with hand-derived gradients.

Conventions: a vector is a 1-D float64 ndarray, a matrix a 2-D row-major
float64 ndarray. Every differentiable operation exists in two forms: a pure
forward function, and a :class:`GradTape` primitive that additionally records
the analytic backward step so a full forward pass can be replayed in reverse.
All gradients here are closed-form; `finite_diff_check` is the harness used
by the tests to certify them against central differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateAlphaError, NumericError, ShapeError

__all__ = [
    "Node",
    "GradTape",
    "as_matrix",
    "as_vector",
    "affine",
    "leaky_relu",
    "abs_normalize",
    "cap_floor_clamp",
    "softmax",
    "softmax_xent",
    "sgd_momentum_step",
    "finite_diff_check",
]

#: Below this, the absolute-value sum of an alpha vector counts as degenerate.
DEGENERATE_EPS = 1e-12


def as_vector(x, what: str = "vector") -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    if out.ndim != 1:
        raise ShapeError(f"{what}: expected 1-D, got shape {out.shape}")
    return out


def as_matrix(x, what: str = "matrix") -> np.ndarray:
    out = np.ascontiguousarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{what}: expected 2-D, got shape {out.shape}")
    return out


def check_finite(x, what: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite entries")
    return x


# ---------------------------------------------------------------------------
# Pure forward operations


def affine(m: np.ndarray, v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[r] = sum_c m[r, c] * v[c] + b[r]."""
    m, v, b = np.asarray(m), np.asarray(v), np.asarray(b)
    if m.ndim != 2 or m.shape[1] != v.shape[-1]:
        raise ShapeError(f"affine: matrix {m.shape} incompatible with vector {v.shape}")
    if b.shape != (m.shape[0],):
        raise ShapeError(f"affine: matrix {m.shape} incompatible with bias {b.shape}")
    return m @ v + b


def leaky_relu(v: np.ndarray, slope: float) -> np.ndarray:
    """Identity for nonnegative entries, `slope * x` for negative ones."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    v = np.asarray(v)
    return np.where(v >= 0.0, v, slope * v)


def abs_normalize(v: np.ndarray, strict: bool = True) -> np.ndarray:
    """Divide by the sum of absolute values so that sum(|out|) == 1.

    With ``strict=True`` an (effectively) all-zero input raises
    :class:`DegenerateAlphaError`; otherwise the denominator is floored at
    ``DEGENERATE_EPS``, which leaves non-degenerate inputs bit-identical to
    the strict result.
    """
    v = np.asarray(v, dtype=np.float64)
    s = float(np.sum(np.abs(v)))
    if s <= DEGENERATE_EPS:
        if strict:
            raise DegenerateAlphaError(
                f"cannot normalize near-zero vector (sum of |entries| = {s:g})"
            )
        s = DEGENERATE_EPS
    return v / s


def cap_floor_clamp(v: np.ndarray, cap: float, floor: float) -> np.ndarray:
    """Clamp |v[0]| from above by `cap` and |v[1:]| from below by `floor`.

    Signs are preserved; a floored exact zero becomes `+floor`. Used on
    normalized alpha vectors, where the cap keeps the original classifier
    from absorbing all the weight and the floor keeps every neighbor alive.
    """
    v = np.asarray(v, dtype=np.float64)
    out = v.copy()
    if abs(out[0]) > cap:
        out[0] = cap * np.sign(out[0])
    if out.shape[0] > 1:
        rest = out[1:]
        low = np.abs(rest) < floor
        # sign'(0) = +1: a zero coordinate is pushed to +floor.
        signs = np.where(rest >= 0.0, 1.0, -1.0)
        rest[low] = floor * signs[low]
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis (max-subtraction)."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_xent(scores: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(scores) against `label`, plus its gradient.

    Returns ``(loss, grad)`` with ``grad[k] = softmax(scores)[k] - 1{k==label}``;
    the gradient coordinates sum to zero.
    """
    scores = as_vector(scores, "scores")
    n = scores.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} scores")
    shifted = scores - np.max(scores)
    logsumexp = float(np.log(np.sum(np.exp(shifted))))
    loss = logsumexp - float(shifted[label])
    grad = np.exp(shifted - logsumexp)
    grad[label] -= 1.0
    check_finite(loss, "softmax_xent loss")
    return loss, grad


def sgd_momentum_step(
    params: np.ndarray,
    grads: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step: v <- momentum*v + g; p <- p - lr*v. Updates in place."""
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if params.shape != grads.shape:
        raise ShapeError(f"sgd step: params {params.shape} vs grads {grads.shape}")
    if params.shape != velocity.shape:
        raise ShapeError(f"sgd step: params {params.shape} vs velocity {velocity.shape}")
    velocity *= momentum
    velocity += grads
    params -= lr * velocity
    return params, velocity


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative disagreement between `analytic_grad` and central differences.

    Per coordinate: |analytic - central| / max(1, |central|). `f` must be a
    scalar function of a flat parameter vector, evaluable at x +- eps*e_k.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_vector(x, "finite_diff_check x")
    analytic_grad = as_vector(analytic_grad, "analytic_grad")
    if x.shape != analytic_grad.shape:
        raise ShapeError(f"finite_diff_check: x {x.shape} vs grad {analytic_grad.shape}")
    worst = 0.0
    for k in range(x.shape[0]):
        bumped = x.copy()
        bumped[k] = x[k] + eps
        hi = float(f(bumped))
        bumped[k] = x[k] - eps
        lo = float(f(bumped))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite objective at coordinate {k}")
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic_grad[k] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Reverse-mode tape


class Node:
    """A tape-tracked value: the forward result and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


class GradTape:
    """Ordered record of primitive applications for reverse-mode replay.

    Each primitive computes its forward value eagerly and pushes a backward
    closure capturing the cached values it needs. `backward` seeds the root
    gradient and replays the closures in exact reverse order of recording.
    Inputs may be Nodes (gradients accumulate) or plain arrays (constants).
    """

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def backward(self, root: Node, seed: float = 1.0) -> None:
        root.grad = root.grad + seed * np.ones_like(root.value)
        for step in reversed(self._steps):
            step()

    def _emit(self, value, backward: Callable[[Node], None]) -> Node:
        out = Node(value)
        self._steps.append(lambda: backward(out))
        return out

    # -- primitives ---------------------------------------------------------

    def affine(self, m, v, b) -> Node:
        mv, vv, bv = _value(m), _value(v), _value(b)
        out_value = affine(mv, vv, bv)

        def back(out: Node) -> None:
            g = out.grad
            if isinstance(m, Node):
                m.grad += np.outer(g, vv)
            if isinstance(v, Node):
                v.grad += mv.T @ g
            if isinstance(b, Node):
                b.grad += g

        return self._emit(out_value, back)

    def leaky_relu(self, v: Node, slope: float) -> Node:
        vv = _value(v)
        out_value = leaky_relu(vv, slope)
        scale = np.where(vv >= 0.0, 1.0, slope)

        def back(out: Node) -> None:
            if isinstance(v, Node):
                v.grad += scale * out.grad

        return self._emit(out_value, back)

    def abs_normalize(self, v: Node, strict: bool = False) -> Node:
        vv = _value(v)
        out_value = abs_normalize(vv, strict=strict)
        s = max(float(np.sum(np.abs(vv))), DEGENERATE_EPS)
        sign = np.sign(vv)  # sign(0) = 0 by convention

        def back(out: Node) -> None:
            if isinstance(v, Node):
                g = out.grad
                # quotient rule: d(a_j/S)/d(a_k) = delta_jk/S - a_j sign(a_k)/S^2
                v.grad += g / s - (float(g @ vv) / (s * s)) * sign

        return self._emit(out_value, back)

    def cap_floor_clamp(self, v: Node, cap: float, floor: float) -> Node:
        vv = _value(v)
        out_value = cap_floor_clamp(vv, cap, floor)
        # Hard projection: clamped coordinates pass no gradient.
        active = out_value == vv

        def back(out: Node) -> None:
            if isinstance(v, Node):
                v.grad += np.where(active, out.grad, 0.0)

        return self._emit(out_value, back)

    def linear_mix(self, coeffs: Node, table) -> Node:
        """coeffs @ table for a constant table: rows (k, d) -> (d,), or (k,) -> scalar."""
        tv = _value(table)
        cv = _value(coeffs)
        if cv.shape[0] != tv.shape[0]:
            raise ShapeError(f"linear_mix: coeffs {cv.shape} vs table {tv.shape}")
        out_value = cv @ tv

        def back(out: Node) -> None:
            if isinstance(coeffs, Node):
                if tv.ndim == 2:
                    coeffs.grad += tv @ out.grad
                else:
                    coeffs.grad += tv * out.grad

        return self._emit(out_value, back)

    def stack(self, nodes: Sequence[Node]) -> Node:
        out_value = np.stack([_value(n) for n in nodes])

        def back(out: Node) -> None:
            for i, n in enumerate(nodes):
                if isinstance(n, Node):
                    n.grad += out.grad[i]

        return self._emit(out_value, back)

    def batch_scores(self, features, weights: Node, biases: Node) -> Node:
        """scores[i, j] = features[i] . weights[j] + biases[j]; features constant."""
        x = _value(features)
        wv, bv = _value(weights), _value(biases)
        if x.shape[1] != wv.shape[1]:
            raise ShapeError(f"batch_scores: features {x.shape} vs weights {wv.shape}")
        out_value = x @ wv.T + bv

        def back(out: Node) -> None:
            g = out.grad
            if isinstance(weights, Node):
                weights.grad += g.T @ x
            if isinstance(biases, Node):
                biases.grad += g.sum(axis=0)

        return self._emit(out_value, back)

    def overwrite_columns(self, base, cols: Node, col_ids) -> Node:
        """Copy of constant `base` with columns `col_ids` replaced by `cols`."""
        bv = _value(base)
        out_value = bv.copy()
        out_value[:, col_ids] = _value(cols)

        def back(out: Node) -> None:
            if isinstance(cols, Node):
                cols.grad += out.grad[:, col_ids]

        return self._emit(out_value, back)

    def mean_softmax_xent(self, scores: Node, labels) -> Node:
        """Mean cross-entropy of row-wise softmax against integer labels."""
        sv = _value(scores)
        labels = np.asarray(labels)
        n = sv.shape[0]
        if labels.shape != (n,):
            raise ShapeError(f"mean_softmax_xent: scores {sv.shape} vs labels {labels.shape}")
        probs = softmax(sv)
        picked = probs[np.arange(n), labels]
        losses = -np.log(picked)
        if not np.all(np.isfinite(losses)):
            bad = int(np.argmax(~np.isfinite(losses)))
            raise NumericError(f"non-finite loss for sample {bad}")
        out_value = np.float64(losses.mean())

        def back(out: Node) -> None:
            if isinstance(scores, Node):
                g = probs.copy()
                g[np.arange(n), labels] -= 1.0
                scores.grad += (float(out.grad) / n) * g

        return self._emit(out_value, back)
