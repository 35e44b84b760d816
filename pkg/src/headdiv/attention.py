"""Multi-head self-attention with a mechanism chosen per head.

Three mechanisms are supported:

* ``SoftmaxFull``: dot-product softmax attention over the whole sequence.
* ``SoftmaxWindow(left, right)``: softmax attention limited to
  ``t - left <= s <= t + right``.
* ``Favor(num_features, feature_seed)``: positive random-feature attention,
  which never forms the ``T x T`` matrix unless asked to.

Inputs may carry leading batch axes: ``x`` has shape ``(..., T, D)`` and every
trace array keeps those axes. Weight gradients are summed over them.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .numkernel import ShapeError, matmul, row_softmax, row_softmax_vjp

__all__ = [
    "SoftmaxFull",
    "SoftmaxWindow",
    "Favor",
    "HeadMechanism",
    "HeadParams",
    "LayerParams",
    "LayerGrads",
    "HeadTrace",
    "TraceMismatchError",
    "MASK_FILL",
    "attention_scale",
    "build_context_mask",
    "head_forward_softmax",
    "favor_omega",
    "favor_feature_map",
    "head_forward_favor",
    "head_forward",
    "layer_forward",
    "layer_backward",
]

MASK_FILL = -1e30
SCALE_MODES = ("paper", "standard")


@dataclass(frozen=True)
class SoftmaxFull:
    pass


@dataclass(frozen=True)
class SoftmaxWindow:
    left: int
    right: int

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ValueError(f"window sizes must be >= 0, got L={self.left} R={self.right}")


@dataclass(frozen=True)
class Favor:
    num_features: int
    feature_seed: int = 0

    def __post_init__(self):
        if self.num_features < 1:
            raise ValueError(f"num_features must be >= 1, got {self.num_features}")


HeadMechanism = Union[SoftmaxFull, SoftmaxWindow, Favor]


@dataclass
class HeadParams:
    """Query/key/value projections of one head, each ``D x H``.

    Also used to carry the gradients of those matrices.
    """

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray

    def __post_init__(self):
        shapes = {self.w_query.shape, self.w_key.shape, self.w_value.shape}
        if len(shapes) != 1:
            raise ShapeError(f"query/key/value shapes differ: {sorted(shapes)}")

    @property
    def model_dim(self) -> int:
        return self.w_query.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_query.shape[1]

    def copy(self) -> "HeadParams":
        return HeadParams(self.w_query.copy(), self.w_key.copy(), self.w_value.copy())


@dataclass
class LayerParams:
    heads: list[tuple[HeadParams, HeadMechanism]]
    w_out: np.ndarray

    def __post_init__(self):
        if not self.heads:
            raise ValueError("a layer needs at least one head")
        h = self.heads[0][0].head_dim
        d = self.heads[0][0].model_dim
        for p, _ in self.heads:
            if (p.model_dim, p.head_dim) != (d, h):
                raise ShapeError("all heads in a layer must share D x H")
        if self.w_out.shape[0] != len(self.heads) * h:
            raise ShapeError(
                f"w_out has {self.w_out.shape[0]} rows, expected N*H = {len(self.heads) * h}"
            )

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def mechanisms(self) -> list[HeadMechanism]:
        return [m for _, m in self.heads]

    def copy(self) -> "LayerParams":
        return LayerParams([(p.copy(), m) for p, m in self.heads], self.w_out.copy())


@dataclass
class LayerGrads:
    heads: list[HeadParams]
    w_out: np.ndarray


@dataclass(frozen=True)
class HeadTrace:
    """Cached forward tensors of one head.

    ``a`` is ``None`` for a FAVOR head run without ``materialize_a``.
    ``cache`` holds mechanism-specific intermediates for the backward pass.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray | None
    y: np.ndarray
    mechanism: HeadMechanism
    scale: float
    cache: dict = field(default_factory=dict, repr=False, compare=False)


class TraceMismatchError(ValueError):
    """Traces passed to the backward pass do not belong to the given layer."""


def attention_scale(head_dim: int, scale_mode: str = "paper") -> float:
    """Logit multiplier: ``1/H`` in ``paper`` mode, ``1/sqrt(H)`` in ``standard`` mode."""
    if scale_mode == "paper":
        return 1.0 / head_dim
    if scale_mode == "standard":
        return 1.0 / math.sqrt(head_dim)
    raise ValueError(f"unknown scale_mode {scale_mode!r}; expected one of {SCALE_MODES}")


def build_context_mask(t_len: int, l: int, r: int) -> np.ndarray:
    """0/1 matrix with ``mask[t, s] = 1`` iff ``t - l <= s <= t + r``.

    A window size ``>= t_len`` is unbounded on that side.
    """
    if t_len < 1:
        raise ValueError("t_len must be >= 1")
    t = np.arange(t_len)[:, None]
    s = np.arange(t_len)[None, :]
    return ((s >= t - l) & (s <= t + r)).astype(np.float64)


def _project(x: np.ndarray, p: HeadParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.shape[-1] != p.model_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, weights expect {p.model_dim}")
    return matmul(x, p.w_query), matmul(x, p.w_key), matmul(x, p.w_value)


def head_forward_softmax(
    x: np.ndarray,
    p: HeadParams,
    mask: np.ndarray | None,
    scale: float,
    mechanism: HeadMechanism | None = None,
) -> HeadTrace:
    """Softmax attention head; ``mask=None`` means full context."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    q, k, v = _project(x, p)
    logits = matmul(q, np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        logits = np.where(mask > 0, logits, MASK_FILL)
    a = row_softmax(logits)
    y = matmul(a, v)
    if mechanism is None:
        mechanism = SoftmaxFull() if mask is None else _window_from_mask(mask)
    return HeadTrace(q, k, v, a, y, mechanism, scale)


def _window_from_mask(mask: np.ndarray) -> SoftmaxWindow:
    t = mask.shape[-1]
    rows, cols = np.nonzero(mask)
    left = int(np.max(rows - cols, initial=0))
    right = int(np.max(cols - rows, initial=0))
    return SoftmaxWindow(left if left < t - 1 else t, right if right < t - 1 else t)


@functools.lru_cache(maxsize=256)
def favor_omega(feature_seed: int, head_dim: int, num_features: int) -> np.ndarray:
    """Frozen ``H x r`` matrix of i.i.d. standard normal projections."""
    rng = np.random.default_rng(feature_seed)
    omega = rng.standard_normal((head_dim, num_features))
    omega.setflags(write=False)
    return omega


def favor_feature_map(m: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Positive features ``r^-1/2 exp(w_j . x - |x|^2 / 2)`` for each row ``x``."""
    r = omega.shape[-1]
    u = matmul(m, omega) - 0.5 * (m * m).sum(axis=-1, keepdims=True)
    return np.exp(u) / math.sqrt(r)


def head_forward_favor(
    x: np.ndarray,
    p: HeadParams,
    mech: Favor,
    materialize_a: bool = False,
    scale: float = 1.0,
) -> HeadTrace:
    """FAVOR head: ``Y = diag(Phi_q Phi_k^T 1)^-1 Phi_q (Phi_k^T V)``.

    Queries and keys are multiplied by ``sqrt(scale)`` before the feature map
    so the kernel approximates ``exp(scale * q.k)``.
    """
    q, k, v = _project(x, p)
    omega = favor_omega(mech.feature_seed, p.head_dim, mech.num_features)
    root = math.sqrt(scale)
    qs = q * root
    ks = k * root
    # Per-row shifts for queries and a per-sequence shift for keys cancel in
    # the normalization; they only keep exp() in range.
    uq = matmul(qs, omega) - 0.5 * (qs * qs).sum(axis=-1, keepdims=True)
    uk = matmul(ks, omega) - 0.5 * (ks * ks).sum(axis=-1, keepdims=True)
    phi_q = np.exp(uq - uq.max(axis=-1, keepdims=True))
    phi_k = np.exp(uk - uk.max(axis=(-2, -1), keepdims=True))
    kv = matmul(np.swapaxes(phi_k, -1, -2), v)  # (..., r, H)
    z = phi_k.sum(axis=-2)  # (..., r)
    den = (phi_q * z[..., None, :]).sum(axis=-1)  # (..., T)
    num = matmul(phi_q, kv)
    y = num / den[..., None]
    a = None
    if materialize_a:
        a = matmul(phi_q, np.swapaxes(phi_k, -1, -2)) / den[..., None]
    cache = {"omega": omega, "qs": qs, "ks": ks, "phi_q": phi_q, "phi_k": phi_k,
             "kv": kv, "z": z, "den": den}
    return HeadTrace(q, k, v, a, y, mech, scale, cache)


def head_forward(
    x: np.ndarray,
    p: HeadParams,
    mech: HeadMechanism,
    scale: float,
    materialize_a: bool = False,
) -> HeadTrace:
    if isinstance(mech, Favor):
        return head_forward_favor(x, p, mech, materialize_a=materialize_a, scale=scale)
    if isinstance(mech, SoftmaxWindow):
        t = x.shape[-2]
        if mech.left < t or mech.right < t:
            mask = build_context_mask(t, mech.left, mech.right)
            return head_forward_softmax(x, p, mask, scale, mechanism=mech)
        return head_forward_softmax(x, p, None, scale, mechanism=mech)
    if isinstance(mech, SoftmaxFull):
        return head_forward_softmax(x, p, None, scale, mechanism=mech)
    raise TypeError(f"unknown head mechanism {mech!r}")


def layer_forward(
    x: np.ndarray,
    params: LayerParams,
    scale_mode: str = "paper",
    materialize_a: bool = False,
) -> tuple[np.ndarray, list[HeadTrace]]:
    """Run every head, concatenate the contexts along features, project by ``w_out``."""
    scale = attention_scale(params.heads[0][0].head_dim, scale_mode)
    traces = [head_forward(x, p, m, scale, materialize_a) for p, m in params.heads]
    concat = np.concatenate([tr.y for tr in traces], axis=-1)
    return matmul(concat, params.w_out), traces


def _flat(m: np.ndarray) -> np.ndarray:
    return m.reshape(-1, m.shape[-1])


def _weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _flat(x).T @ _flat(g)


def _add(base: np.ndarray, extra: np.ndarray | None) -> np.ndarray:
    return base if extra is None else base + extra


def _softmax_backward(tr: HeadTrace, dy: np.ndarray, extra: dict):
    dy = _add(dy, extra.get("y"))
    da = _add(matmul(dy, np.swapaxes(tr.v, -1, -2)), extra.get("a"))
    dv = _add(matmul(np.swapaxes(tr.a, -1, -2), dy), extra.get("v"))
    # Masked entries have a == 0, so their logit gradient vanishes here.
    dlogits = row_softmax_vjp(da, tr.a) * tr.scale
    dq = _add(matmul(dlogits, tr.k), extra.get("q"))
    dk = _add(matmul(np.swapaxes(dlogits, -1, -2), tr.q), extra.get("k"))
    return dq, dk, dv


def _feature_map_vjp(g: np.ndarray, phi: np.ndarray, m: np.ndarray, omega: np.ndarray):
    gp = g * phi
    return gp @ omega.T - m * gp.sum(axis=-1, keepdims=True)


def _favor_backward(tr: HeadTrace, dy: np.ndarray, extra: dict):
    c = tr.cache
    phi_q, phi_k, den = c["phi_q"], c["phi_k"], c["den"]
    dy = _add(dy, extra.get("y"))
    d_num = dy / den[..., None]
    d_den = -(dy * tr.y).sum(axis=-1) / den
    d_phi_q = matmul(d_num, np.swapaxes(c["kv"], -1, -2))
    d_phi_k = np.zeros_like(phi_k)
    da = extra.get("a")
    if da is not None:
        if tr.a is None:
            raise TraceMismatchError("gradient supplied for an attention matrix that was never formed")
        d_den = d_den - (da * tr.a).sum(axis=-1) / den
        ds = da / den[..., None]
        d_phi_q = d_phi_q + matmul(ds, phi_k)
        d_phi_k = d_phi_k + matmul(np.swapaxes(ds, -1, -2), phi_q)
    d_phi_q = d_phi_q + d_den[..., None] * c["z"][..., None, :]
    d_kv = matmul(np.swapaxes(phi_q, -1, -2), d_num)  # (..., r, H)
    dz = matmul(np.swapaxes(phi_q, -1, -2), d_den[..., None])[..., 0]  # (..., r)
    d_phi_k = d_phi_k + matmul(tr.v, np.swapaxes(d_kv, -1, -2)) + dz[..., None, :]
    dv = _add(matmul(phi_k, d_kv), extra.get("v"))
    root = math.sqrt(tr.scale)
    dq = _feature_map_vjp(d_phi_q, phi_q, c["qs"], c["omega"]) * root
    dk = _feature_map_vjp(d_phi_k, phi_k, c["ks"], c["omega"]) * root
    return _add(dq, extra.get("q")), _add(dk, extra.get("k")), dv


def layer_backward(
    d_y: np.ndarray,
    x: np.ndarray,
    params: LayerParams,
    traces: list[HeadTrace],
    trace_grads: list[dict] | None = None,
) -> tuple[LayerGrads, np.ndarray]:
    """Gradients of a scalar loss w.r.t. all layer weights and the input ``x``.

    ``d_y`` is the upstream gradient of the layer output. ``trace_grads``
    optionally adds, per head, direct gradients on cached tensors keyed by
    ``"q"``, ``"k"``, ``"v"``, ``"a"``, ``"y"`` (as produced by a loss on the
    traces themselves).
    """
    if len(traces) != params.num_heads:
        raise TraceMismatchError(f"{len(traces)} traces for a layer with {params.num_heads} heads")
    h = params.heads[0][0].head_dim
    for i, ((p, mech), tr) in enumerate(zip(params.heads, traces)):
        if tr.mechanism != mech:
            raise TraceMismatchError(f"head {i}: trace mechanism {tr.mechanism} != {mech}")
        if tr.q.shape[:-1] != x.shape[:-1] or tr.q.shape[-1] != h:
            raise TraceMismatchError(f"head {i}: trace shape {tr.q.shape} does not fit input {x.shape}")
    if trace_grads is None:
        trace_grads = [{} for _ in traces]

    concat = np.concatenate([tr.y for tr in traces], axis=-1)
    d_w_out = _weight_grad(concat, d_y)
    d_concat = matmul(d_y, params.w_out.T)

    d_x = np.zeros_like(x)
    head_grads = []
    for i, ((p, mech), tr) in enumerate(zip(params.heads, traces)):
        dy_n = d_concat[..., i * h:(i + 1) * h]
        if isinstance(mech, Favor):
            dq, dk, dv = _favor_backward(tr, dy_n, trace_grads[i])
        else:
            dq, dk, dv = _softmax_backward(tr, dy_n, trace_grads[i])
        head_grads.append(HeadParams(_weight_grad(x, dq), _weight_grad(x, dk), _weight_grad(x, dv)))
        d_x += dq @ p.w_query.T + dk @ p.w_key.T + dv @ p.w_value.T
    return LayerGrads(head_grads, d_w_out), d_x
