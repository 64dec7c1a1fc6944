"""Dense float64 kernels: softmax, layer norm, classification losses and the
central-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every kernel
operates on the last axis, so a stack of matrices (``(..., rows, cols)``) is
handled the same way as a single matrix.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TargetError

DTYPE = np.float64
LN_EPS = 1e-5


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim < 2:
        raise ShapeError(f"{name}: expected at least 2 dimensions, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Entries equal to ``-inf`` get probability zero as long as each row keeps at
    least one finite entry.
    """
    m = as_matrix(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):  # an all -inf slice is a legitimate log(0)
        out = np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` per row, population variance."""
    x = as_matrix(x, "x")
    gamma = np.asarray(gamma, dtype=DTYPE).reshape(-1)
    beta = np.asarray(beta, dtype=DTYPE).reshape(-1)
    d = x.shape[-1]
    if gamma.shape[0] != d or beta.shape[0] != d:
        raise ShapeError(f"layer_norm: gamma/beta length must be {d}, got {gamma.shape[0]}/{beta.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gamma * xc / np.sqrt(var + eps) + beta


def cross_entropy(logits, targets) -> float:
    """Mean of ``-log softmax(logits)[target]`` over rows."""
    logits = as_matrix(logits, "logits")
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape[0] != logits.shape[0]:
        raise TargetError(f"expected {logits.shape[0]} targets, got {targets.shape[0]}")
    n_classes = logits.shape[-1]
    if not np.issubdtype(targets.dtype, np.integer):
        raise TargetError("class targets must be integers")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise TargetError(f"class index out of range [0, {n_classes})")
    logp = log_softmax_rows(logits)
    return float(-logp[np.arange(logp.shape[0]), targets].mean())


def binary_cross_entropy(logits, targets) -> float:
    """Mean per-class BCE on sigmoid probabilities (stable logits form)."""
    logits = as_matrix(logits, "logits")
    targets = np.asarray(targets, dtype=DTYPE).reshape(logits.shape) if np.size(targets) == logits.size else None
    if targets is None:
        raise TargetError("multilabel target must have one entry per class")
    if np.any((targets != 0) & (targets != 1)):
        raise TargetError("multilabel targets must be 0/1")
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(loss.mean())


def classification_losses(logits, targets, mode: str | None = None) -> float:
    """Cross-entropy for class indices, BCE for 0/1 multilabel vectors.

    ``mode`` is ``"ce"`` or ``"bce"``; when omitted it is inferred from the
    target shape (same size as the logits means multilabel).
    """
    logits = as_matrix(logits, "logits")
    if mode is None:
        t = np.asarray(targets)
        mode = "bce" if t.size == logits.size and t.ndim >= 1 and t.shape[-1] == logits.shape[-1] else "ce"
    if mode == "ce":
        return cross_entropy(logits, targets)
    if mode == "bce":
        return binary_cross_entropy(logits, targets)
    raise ValueError(f"unknown loss mode {mode!r}")


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence,
    h: float = 1e-5,
    entries: dict[str, Iterable[tuple[int, ...]]] | None = None,
) -> list[np.ndarray]:
    """Central-difference estimate of df/dθ for each parameter's ``data`` array.

    ``f`` takes no arguments and reads the parameters in place; each entry is
    perturbed by ±h and restored exactly afterwards. ``entries`` optionally maps
    a parameter name to the subset of indices to probe (others stay zero).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    grads = []
    for p in params:
        data = p.data
        g = np.zeros_like(data)
        idx_iter = np.ndindex(*data.shape) if entries is None or p.name not in entries else entries[p.name]
        for idx in idx_iter:
            orig = data[idx]
            data[idx] = orig + h
            fp = f()
            data[idx] = orig - h
            fm = f()
            data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value while probing {getattr(p, 'name', '?')}{idx}")
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, guard: float = 1e-10) -> float:
    """``||a - b|| / max(||a|| + ||b||, guard)``."""
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = float(np.linalg.norm(a) + np.linalg.norm(b))
    return num / max(den, guard)
