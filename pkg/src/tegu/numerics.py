"""Dense float64 primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in float64. ``-inf`` is the only allowed
non-finite value (it marks masked vocabulary entries); NaN is always an error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

RMS_EPS = 1e-6


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    pass


def _first_bad_index(x: np.ndarray, bad: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(bad)[0])


def check_finite(x: np.ndarray, what: str = "array") -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = _first_bad_index(x, bad)
        raise NumericsError(f"{what} has non-finite value {x[idx]!r} at index {idx}")


def check_no_nan(x: np.ndarray, what: str = "array") -> None:
    bad = np.isnan(x)
    if bad.any():
        raise NumericsError(f"{what} has NaN at index {_first_bad_index(x, bad)}")


# ---------------------------------------------------------------------------
# Log-space probability helpers
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax along ``axis``; rejects non-finite input."""
    logits = np.asarray(logits, dtype=np.float64)
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax that tolerates ``-inf`` entries (masked logits get probability 0)."""
    logits = np.asarray(logits, dtype=np.float64)
    check_no_nan(logits, "logits")
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def weighted_logsumexp(logps: Sequence[np.ndarray], logweights: Sequence[float]) -> np.ndarray:
    """Elementwise ``log(sum_k w_k * exp(logp_k))`` for log-weights ``log w_k``.

    Weights must exponentiate to a distribution. Zero weights (``-inf``
    log-weight) are allowed and drop out of the mixture.
    """
    if len(logps) == 0:
        raise NumericsError("weighted_logsumexp needs at least one vector")
    if len(logps) != len(logweights):
        raise ShapeError(f"got {len(logps)} vectors but {len(logweights)} weights")
    lw = np.asarray(logweights, dtype=np.float64)
    check_no_nan(lw, "logweights")
    total = float(np.exp(lw).sum())
    if abs(total - 1.0) > 1e-6:
        raise NumericsError(f"weights sum to {total!r}, expected 1")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in logps])
    check_no_nan(stacked, "logps")
    if len(logps) == 1 and lw[0] == 0.0:
        return stacked[0].copy()
    terms = stacked + lw.reshape((-1,) + (1,) * (stacked.ndim - 1))
    return logsumexp(terms, axis=0)


def shannon_entropy(p: np.ndarray, axis: int = -1) -> np.ndarray | float:
    """Entropy in nats along ``axis`` with the 0*log(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise NumericsError(f"negative probability at index {_first_bad_index(p, p < 0)}")
    sums = p.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NumericsError("probabilities do not sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=axis)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


def entropy_from_logprobs(logp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Entropy of distributions given as log-probabilities (rows need not be checked)."""
    p = np.exp(logp)
    terms = np.where(p > 0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


# ---------------------------------------------------------------------------
# Core ops with analytic backward passes
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``a @ b`` w.r.t. ``a`` (any leading dims) and ``b`` (2-D)."""
    grad_a = grad_out @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grad_b = a2.T @ g2
    return grad_a, grad_b


def transpose(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def transpose_backward(grad_out: np.ndarray) -> np.ndarray:
    return np.swapaxes(grad_out, -1, -2)


def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise NumericsError(f"id {int(bad)} out of range for table with {table.shape[0]} rows")
    return table[ids]


def embedding_backward(grad_out: np.ndarray, ids: np.ndarray, n_rows: int) -> np.ndarray:
    grad = np.zeros((n_rows, grad_out.shape[-1]))
    np.add.at(grad, np.asarray(ids).reshape(-1), grad_out.reshape(-1, grad_out.shape[-1]))
    return grad


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(y, inv_rms)``; ``inv_rms`` is kept for the backward pass."""
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match input {x.shape}")
    # sum/d rather than np.mean: same value, far less per-call overhead on single rows
    inv = 1.0 / np.sqrt((x * x).sum(axis=-1, keepdims=True) / x.shape[-1] + eps)
    return x * inv * gain, inv


def rmsnorm_backward(
    grad_out: np.ndarray, x: np.ndarray, gain: np.ndarray, inv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    xhat = x * inv
    grad_gain = (grad_out * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    gx = grad_out * gain
    d = x.shape[-1]
    grad_x = inv * (gx - xhat * np.sum(gx * xhat, axis=-1, keepdims=True) / d)
    return grad_x, grad_gain


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * (s * (1.0 + x * (1.0 - s)))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def mul_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out * b, grad_out * a


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (grad_out - np.sum(grad_out * probs, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences ``(f(p+h) - f(p-h)) / 2h``.

    With ``coords`` only those coordinates are probed and the result is a 1-D
    array in the same order; otherwise the full gradient is returned. ``params``
    is perturbed in place and restored.
    """
    if h <= 0:
        raise NumericsError("step size h must be positive")
    f0 = float(loss_fn(params))
    if float(loss_fn(params)) != f0:
        raise NumericsError("loss_fn is not deterministic")
    targets = list(coords) if coords is not None else list(np.ndindex(params.shape))
    out = np.zeros(len(targets))
    for n, idx in enumerate(targets):
        orig = params[idx]
        params[idx] = orig + h
        fp = float(loss_fn(params))
        params[idx] = orig - h
        fm = float(loss_fn(params))
        params[idx] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out if coords is not None else out.reshape(params.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
