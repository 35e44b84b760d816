"""Dense float64 matrix kernel with hand-written vector-Jacobian products.

Every forward op has a matching ``*_vjp`` that maps an upstream gradient to
input gradients. Ops act on the last two axes, so stacks of matrices
(``(..., rows, cols)``) go through the same code as single matrices.

``fd_gradient`` is a central-difference oracle kept independent of the VJPs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "as_matrix",
    "matmul",
    "matmul_vjp",
    "row_softmax",
    "row_softmax_vjp",
    "row_normalize",
    "row_normalize_vjp",
    "fd_gradient",
    "rel_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a float64 array with at least two axes."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"{m.size} entries cannot form a {rows}x{cols} matrix")
        m = m.reshape(rows, cols)
    if m.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def matmul_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(g b^T, a^T g)``, reduced over broadcast batch axes."""
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_vjp(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    """VJP of ``row_softmax`` given its output ``s``."""
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def row_normalize(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale each row to unit Euclidean norm; rows with norm < eps become zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    live = norm >= eps
    return np.where(live, m / np.where(live, norm, 1.0), 0.0)


def row_normalize_vjp(g: np.ndarray, m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """VJP of ``row_normalize`` at input ``m``.

    For ``u = x / |x|`` the Jacobian is ``(I - u u^T) / |x|``. Guarded rows
    are constant zero, so their gradient is zero.
    """
    norm = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    live = norm >= eps
    safe = np.where(live, norm, 1.0)
    u = m / safe
    dx = (g - u * (g * u).sum(axis=-1, keepdims=True)) / safe
    return np.where(live, dx, 0.0)


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one entry at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
