"""Inter-head correlation and the diversity penalty built on it.

For two ``T x k`` representations the correlation is the mean over time of
the cosine similarity between matching rows. The diversity loss of ``N``
heads is ``|D - I|_F^2 / N^2`` where ``D`` is the ``N x N`` correlation
matrix. A correlation of -1 is penalized exactly like +1.

Representations may carry leading batch axes, e.g. ``(B, T, k)``. The loss is
then computed per sequence and averaged over the batch with equal weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import HeadTrace
from .numkernel import ShapeError, row_normalize, row_normalize_vjp

__all__ = [
    "DiversityKind",
    "RepresentationUnavailable",
    "DiversityReport",
    "LayerDiversity",
    "pairwise_correlation",
    "similarity_matrix",
    "diversity_loss",
    "layer_diversity",
    "cosine_similarity_matrix",
    "grad_similarity_loss",
]


class DiversityKind(enum.Enum):
    """Which per-head tensor the correlation is measured on.

    The value is the short label used in reports and the trace attribute name
    in lower case.
    """

    CONTEXT = "Y"
    ATTENTION = "A"
    QUERY = "Q"
    KEY = "K"
    VALUE = "V"

    @property
    def attr(self) -> str:
        return self.value.lower()

    @classmethod
    def parse(cls, s: "str | DiversityKind") -> "DiversityKind":
        if isinstance(s, cls):
            return s
        key = str(s).strip()
        for kind in cls:
            if key.upper() in (kind.value, kind.name):
                return kind
        aliases = {"attentionprob": cls.ATTENTION, "attention_prob": cls.ATTENTION,
                   "context": cls.CONTEXT, "query": cls.QUERY, "key": cls.KEY, "value": cls.VALUE}
        try:
            return aliases[key.lower()]
        except KeyError:
            raise ValueError(f"unknown diversity kind {s!r}") from None


# Row order used in every report file.
KIND_ORDER = (DiversityKind.ATTENTION, DiversityKind.QUERY, DiversityKind.KEY,
              DiversityKind.VALUE, DiversityKind.CONTEXT)


class RepresentationUnavailable(LookupError):
    """A head did not record the tensor a diversity kind needs."""


@dataclass
class LayerDiversity:
    per_kind: dict[DiversityKind, float] = field(default_factory=dict)
    similarity: dict[DiversityKind, np.ndarray] = field(default_factory=dict)


@dataclass
class DiversityReport:
    """Per-layer diversity losses and similarity matrices.

    ``total`` sums a kind over layers (the reporting convention); training
    penalizes the mean over layers instead.
    """

    per_layer: list[LayerDiversity]

    def total(self, kind: DiversityKind) -> float:
        return float(sum(layer.per_kind[kind] for layer in self.per_layer))

    def kinds(self) -> list[DiversityKind]:
        present = set()
        for layer in self.per_layer:
            present.update(layer.per_kind)
        return [k for k in KIND_ORDER if k in present]


def pairwise_correlation(rep_m: np.ndarray, rep_n: np.ndarray) -> float:
    """Mean over time steps of the row-wise cosine similarity of two ``T x k`` matrices."""
    rep_m = np.asarray(rep_m, dtype=np.float64)
    rep_n = np.asarray(rep_n, dtype=np.float64)
    if rep_m.shape != rep_n.shape:
        raise ShapeError(f"representation shapes differ: {rep_m.shape} vs {rep_n.shape}")
    if rep_m.ndim != 2 or rep_m.shape[0] < 1:
        raise ShapeError(f"expected a T x k matrix with T >= 1, got {rep_m.shape}")
    t = rep_m.shape[0]
    return float((row_normalize(rep_m) * row_normalize(rep_n)).sum() / t)


def _stack(reps: Sequence[np.ndarray]) -> np.ndarray:
    reps = [np.asarray(r, dtype=np.float64) for r in reps]
    if not reps:
        raise ValueError("need at least one representation")
    shape = reps[0].shape
    for r in reps[1:]:
        if r.shape != shape:
            raise ShapeError(f"representation shapes differ: {shape} vs {r.shape}")
    if len(shape) < 2:
        raise ShapeError(f"expected T x k matrices, got {shape}")
    return np.stack(reps)


def _by_sequence(unit: np.ndarray) -> np.ndarray:
    # (N, ..., T, k) -> (B, N, T*k) with every leading batch axis folded into B
    n = unit.shape[0]
    flat = unit.reshape(n, -1, unit.shape[-2] * unit.shape[-1])
    return np.ascontiguousarray(np.swapaxes(flat, 0, 1))


def _diversity(reps: Sequence[np.ndarray], with_grads: bool):
    stacked = _stack(reps)
    n = stacked.shape[0]
    t = stacked.shape[-2]
    unit = row_normalize(stacked)
    seqs = _by_sequence(unit)
    d = seqs @ np.swapaxes(seqs, -1, -2) / t  # (B, N, N)
    d = 0.5 * (d + np.swapaxes(d, -1, -2))  # exact symmetry regardless of BLAS order
    resid = d - np.eye(n)
    per_seq = (resid ** 2).sum(axis=(-2, -1)) / n**2
    batch = per_seq.shape[0]
    loss = float(per_seq.mean())
    sim = d.mean(axis=0)
    if not with_grads:
        return loss, sim, None

    # d loss / d D, then through the bilinear correlation and the normalization.
    g_d = 2.0 * resid / (n**2 * batch)
    g_seqs = (g_d + np.swapaxes(g_d, -1, -2)) @ seqs / t  # (B, N, T*k)
    g_unit = np.swapaxes(g_seqs, 0, 1).reshape(unit.shape)
    g_rep = row_normalize_vjp(g_unit, stacked)
    return loss, sim, list(g_rep)


def similarity_matrix(reps: Sequence[np.ndarray]) -> np.ndarray:
    """``N x N`` matrix of pairwise correlations, averaged over any batch axes."""
    return _diversity(reps, with_grads=False)[1]


def diversity_loss(reps: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Diversity loss of ``N`` same-shaped representations and its gradients.

    Returns ``(loss, grads)`` with one gradient array per representation.
    """
    loss, _, grads = _diversity(reps, with_grads=True)
    return loss, grads


def _representations(traces: Sequence[HeadTrace], kind: DiversityKind) -> list[np.ndarray]:
    reps = []
    for i, tr in enumerate(traces):
        rep = getattr(tr, kind.attr)
        if rep is None:
            raise RepresentationUnavailable(
                f"head {i} ({tr.mechanism}) has no {kind.name.lower()} representation; "
                "run the layer with materialize_a=True"
            )
        reps.append(rep)
    return reps


def layer_diversity(
    traces: Sequence[HeadTrace], kind: DiversityKind, with_grads: bool = False
):
    """Diversity loss and ``N x N`` similarity for one layer's heads.

    Returns ``(loss, similarity)``, or ``(loss, similarity, grads)`` when
    ``with_grads`` is set; ``grads`` is one array per head shaped like the
    selected representation.
    """
    kind = DiversityKind.parse(kind)
    loss, sim, grads = _diversity(_representations(traces, kind), with_grads)
    if with_grads:
        return loss, sim, grads
    return loss, sim


def cosine_similarity_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine similarities of flattened arrays; a zero vector has cosine 0 with
    everything except itself, where the entry is 1."""
    flat = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    unit = row_normalize(flat)
    c = unit @ unit.T
    np.fill_diagonal(c, 1.0)
    return c


def grad_similarity_loss(per_head_grads: Sequence[Sequence[np.ndarray]]) -> float:
    """Mean over layers of ``mean((C - I)^2)`` for the per-head gradient cosine matrix ``C``."""
    if not per_head_grads:
        raise ValueError("need at least one layer")
    values = []
    for layer in per_head_grads:
        c = cosine_similarity_matrix(layer)
        values.append(float(((c - np.eye(len(layer))) ** 2).mean()))
    return float(np.mean(values))
