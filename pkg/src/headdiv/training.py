"""Toy training of a stacked attention classifier with a diversity penalty.

The task is per-frame labeling of a random token sequence where the label at
position ``t`` is the token at ``t + offsets[t % len(offsets)]``. Positions
whose source falls outside the sequence get a reserved extra class, so the
classifier has ``vocab + 1`` outputs.

Model: token embedding + fixed sinusoidal positions, then ``P`` residual
attention layers, then a linear per-frame classifier. Loss is mean per-frame
cross-entropy plus ``lambda`` times the mean over layers of the chosen
diversity loss. Optimizer is plain SGD.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import (
    Favor,
    HeadMechanism,
    HeadParams,
    HeadTrace,
    LayerGrads,
    LayerParams,
    SoftmaxFull,
    attention_scale,
    layer_backward,
    layer_forward,
)
from .diversity import (
    KIND_ORDER,
    DiversityKind,
    DiversityReport,
    LayerDiversity,
    grad_similarity_loss,
    layer_diversity,
)
from .numkernel import row_softmax

log = logging.getLogger(__name__)

__all__ = [
    "SyntheticTaskSpec",
    "TrainConfig",
    "ModelParams",
    "ModelGrads",
    "Forward",
    "MetricRow",
    "RunArtifacts",
    "TrainingDiverged",
    "generate_task",
    "make_splits",
    "sinusoidal_positions",
    "init_model",
    "forward",
    "model_forward",
    "cross_entropy",
    "total_loss",
    "backward",
    "loss_and_grads",
    "sgd_step",
    "accuracy",
    "measure_diversity",
    "capture_head_gradients",
    "train",
]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seq_len: int = 24
    vocab: int = 16
    offsets: tuple[int, ...] = (-3, 2)
    num_train: int = 2000
    num_eval: int = 256

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if not self.offsets:
            raise ValueError("offsets must be nonempty")
        for o in self.offsets:
            if abs(o) >= self.seq_len:
                raise ValueError(f"offset {o} does not fit seq_len {self.seq_len}")
        if self.num_train < 1 or self.num_eval < 1:
            raise ValueError("num_train and num_eval must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.vocab + 1

    @property
    def reserved_class(self) -> int:
        return self.vocab


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 3
    heads: int = 4
    model_dim: int = 32
    head_dim: int = 8
    mechanisms: tuple[HeadMechanism, ...] | None = None
    diversity_kind: DiversityKind | None = None
    lam: float = 0.0
    scale_mode: str = "paper"
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 0.05
    seed: int = 0
    log_interval: int = 250
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)

    def __post_init__(self):
        if self.mechanisms is None:
            object.__setattr__(self, "mechanisms", (SoftmaxFull(),) * self.heads)
        else:
            object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        if self.diversity_kind is not None:
            object.__setattr__(self, "diversity_kind", DiversityKind.parse(self.diversity_kind))
        if len(self.mechanisms) != self.heads:
            raise ValueError(f"{len(self.mechanisms)} mechanisms given for {self.heads} heads")
        if self.layers < 0 or self.heads < 1 or self.model_dim < 1 or self.head_dim < 1:
            raise ValueError("layers >= 0, heads >= 1, model_dim >= 1, head_dim >= 1 required")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.diversity_kind is None and self.lam != 0:
            raise ValueError("lambda must be 0 when no diversity_kind is set")
        if self.steps < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("steps, batch_size and log_interval must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        attention_scale(self.head_dim, self.scale_mode)

    @property
    def needs_attention_matrix(self) -> bool:
        return self.diversity_kind is DiversityKind.ATTENTION and self.lam > 0


@dataclass
class ModelParams:
    embed: np.ndarray
    attention_layers: list[LayerParams]
    classifier: np.ndarray
    positional: np.ndarray

    def trainable(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (positional table excluded)."""
        out = [self.embed]
        for layer in self.attention_layers:
            for p, _ in layer.heads:
                out.extend((p.w_query, p.w_key, p.w_value))
            out.append(layer.w_out)
        out.append(self.classifier)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.embed.copy(), [l.copy() for l in self.attention_layers],
                           self.classifier.copy(), self.positional)


@dataclass
class ModelGrads:
    embed: np.ndarray
    attention_layers: list[LayerGrads]
    classifier: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [self.embed]
        for layer in self.attention_layers:
            for g in layer.heads:
                out.extend((g.w_query, g.w_key, g.w_value))
            out.append(layer.w_out)
        out.append(self.classifier)
        return out


@dataclass
class Forward:
    tokens: np.ndarray
    hidden: list[np.ndarray]  # input to each layer, then the final hidden state
    traces: list[list[HeadTrace]]
    logits: np.ndarray
    scale_mode: str


@dataclass(frozen=True)
class MetricRow:
    step: int
    task_loss: float
    diversity: dict  # DiversityKind -> loss summed over layers
    eval_accuracy: float


@dataclass
class RunArtifacts:
    config: TrainConfig
    metrics: list[MetricRow]
    report: DiversityReport
    grad_similarity: float
    params: ModelParams


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def generate_task(spec: SyntheticTaskSpec, seed, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(tokens, labels)``, both ``n x T`` integer arrays."""
    if n is None:
        n = spec.num_train
    rng = np.random.default_rng(seed)
    t_len = spec.seq_len
    tokens = rng.integers(0, spec.vocab, size=(n, t_len))
    pos = np.arange(t_len)
    offs = np.asarray(spec.offsets)[pos % len(spec.offsets)]
    src = pos + offs
    valid = (src >= 0) & (src < t_len)
    labels = np.full((n, t_len), spec.reserved_class, dtype=tokens.dtype)
    labels[:, valid] = tokens[:, src[valid]]
    return tokens, labels


def make_splits(spec: SyntheticTaskSpec, seed: int):
    """Train and eval sets drawn from independent streams derived from ``seed``."""
    return (generate_task(spec, [seed, 0], spec.num_train),
            generate_task(spec, [seed, 1], spec.num_eval))


def sinusoidal_positions(t_len: int, dim: int) -> np.ndarray:
    pos = np.arange(t_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    s = 1.0 / math.sqrt(rows)
    return rng.uniform(-s, s, size=(rows, cols))


def init_model(config: TrainConfig, rng: np.random.Generator | int) -> ModelParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` init, fan_in being the row count."""
    rng = np.random.default_rng(rng)
    d, h, n = config.model_dim, config.head_dim, config.heads
    task = config.task
    embed = _uniform(rng, task.vocab, d)
    layers = []
    for _ in range(config.layers):
        heads = []
        for mech in config.mechanisms:
            heads.append((HeadParams(_uniform(rng, d, h), _uniform(rng, d, h), _uniform(rng, d, h)), mech))
        layers.append(LayerParams(heads, _uniform(rng, n * h, d)))
    classifier = _uniform(rng, d, task.num_classes)
    return ModelParams(embed, layers, classifier, sinusoidal_positions(task.seq_len, d))


def forward(params: ModelParams, tokens: np.ndarray, scale_mode: str = "paper",
            materialize_a: bool = False) -> Forward:
    tokens = np.asarray(tokens)
    t_len = tokens.shape[-1]
    h = params.embed[tokens] + params.positional[:t_len]
    hidden = [h]
    traces = []
    for layer in params.attention_layers:
        out, tr = layer_forward(h, layer, scale_mode, materialize_a)
        h = h + out
        hidden.append(h)
        traces.append(tr)
    logits = h @ params.classifier
    return Forward(tokens, hidden, traces, logits, scale_mode)


def model_forward(params: ModelParams, tokens: np.ndarray, scale_mode: str = "paper",
                  materialize_a: bool = False):
    """Return ``(logits, traces)`` where ``traces[layer][head]`` is a :class:`HeadTrace`."""
    fwd = forward(params, tokens, scale_mode, materialize_a)
    return fwd.logits, fwd.traces


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-frame cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    count = labels.size
    value = float(-picked.sum() / count)
    grad = row_softmax(logits)
    np.put_along_axis(grad, labels[..., None],
                      np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return value, grad / count


def total_loss(fwd: Forward, labels: np.ndarray, kind: DiversityKind | None, lam: float):
    """Task cross-entropy plus ``lam`` times the mean-over-layers diversity loss.

    Returns ``(value, dlogits, trace_grads)``; ``trace_grads[layer][head]`` maps
    trace attribute names to gradients of the diversity term. With ``lam == 0``
    the diversity term is skipped entirely.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    value, dlogits = cross_entropy(fwd.logits, labels)
    trace_grads = [[{} for _ in layer] for layer in fwd.traces]
    if lam == 0 or kind is None or not fwd.traces:
        return value, dlogits, trace_grads
    kind = DiversityKind.parse(kind)
    p = len(fwd.traces)
    div = 0.0
    for li, traces in enumerate(fwd.traces):
        loss, _, grads = layer_diversity(traces, kind, with_grads=True)
        div += loss
        for hi, g in enumerate(grads):
            trace_grads[li][hi][kind.attr] = g * (lam / p)
    return value + lam * (div / p), dlogits, trace_grads


def backward(params: ModelParams, fwd: Forward, dlogits: np.ndarray,
             trace_grads: list[list[dict]] | None = None) -> ModelGrads:
    d_classifier = fwd.hidden[-1].reshape(-1, params.classifier.shape[0]).T @ \
        dlogits.reshape(-1, dlogits.shape[-1])
    dh = dlogits @ params.classifier.T
    layer_grads = []
    for li in range(len(params.attention_layers) - 1, -1, -1):
        tg = None if trace_grads is None else trace_grads[li]
        lg, dx = layer_backward(dh, fwd.hidden[li], params.attention_layers[li], fwd.traces[li], tg)
        dh = dh + dx  # residual
        layer_grads.append(lg)
    layer_grads.reverse()
    d_embed = np.zeros_like(params.embed)
    np.add.at(d_embed, fwd.tokens.reshape(-1), dh.reshape(-1, dh.shape[-1]))
    return ModelGrads(d_embed, layer_grads, d_classifier)


def loss_and_grads(params: ModelParams, tokens, labels, kind=None, lam: float = 0.0,
                   scale_mode: str = "paper") -> tuple[float, ModelGrads]:
    materialize = kind is not None and DiversityKind.parse(kind) is DiversityKind.ATTENTION and lam > 0
    fwd = forward(params, tokens, scale_mode, materialize_a=materialize)
    value, dlogits, tg = total_loss(fwd, labels, kind, lam)
    return value, backward(params, fwd, dlogits, tg)


def sgd_step(params: ModelParams, grads: ModelGrads, learning_rate: float) -> None:
    """In-place ``p -= lr * g`` over all trainable arrays."""
    for p, g in zip(params.trainable(), grads.arrays()):
        p -= learning_rate * g


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == labels).mean())


def measure_diversity(params: ModelParams, tokens, scale_mode: str = "paper",
                      kinds: Sequence[DiversityKind] = KIND_ORDER) -> DiversityReport:
    """All requested diversity losses per layer, with FAVOR attention materialized."""
    fwd = forward(params, tokens, scale_mode, materialize_a=True)
    return _report_from_traces(fwd.traces, kinds)


def _report_from_traces(traces, kinds) -> DiversityReport:
    per_layer = []
    for layer in traces:
        ld = LayerDiversity()
        for kind in kinds:
            loss, sim = layer_diversity(layer, kind)
            ld.per_kind[kind] = loss
            ld.similarity[kind] = sim
        per_layer.append(ld)
    return DiversityReport(per_layer)


def capture_head_gradients(params: ModelParams, tokens, labels, param_kind: str = "query",
                           scale_mode: str = "paper") -> list[list[np.ndarray]]:
    """Per-layer lists of per-head task-loss gradients of ``w_{param_kind}``."""
    if param_kind not in ("query", "key", "value"):
        raise ValueError(f"param_kind must be query, key or value, got {param_kind!r}")
    _, grads = loss_and_grads(params, tokens, labels, scale_mode=scale_mode)
    attr = "w_" + param_kind
    return [[getattr(g, attr) for g in layer.heads] for layer in grads.attention_layers]


def _log_row(step, params, config, eval_tokens, eval_labels) -> MetricRow:
    fwd = forward(params, eval_tokens, config.scale_mode, materialize_a=True)
    loss, _ = cross_entropy(fwd.logits, eval_labels)
    report = _report_from_traces(fwd.traces, KIND_ORDER)
    div = {k: report.total(k) for k in KIND_ORDER}
    return MetricRow(step, loss, div, accuracy(fwd.logits, eval_labels))


def train(config: TrainConfig) -> RunArtifacts:
    """Run SGD for ``config.steps`` steps; deterministic given ``config.seed``."""
    (x_train, y_train), (x_eval, y_eval) = make_splits(config.task, config.seed)
    rng = np.random.default_rng([config.seed, 2])
    params = init_model(config, rng)
    kind = config.diversity_kind
    lam = config.lam

    metrics = []
    order = rng.permutation(len(x_train))
    cursor = 0
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(x_train))
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        value, grads = loss_and_grads(params, x_train[idx], y_train[idx], kind, lam, config.scale_mode)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        sgd_step(params, grads, config.learning_rate)
        if step % config.log_interval == 0 or step == config.steps:
            row = _log_row(step, params, config, x_eval, y_eval)
            metrics.append(row)
            log.info("step %d loss %.4f acc %.4f", step, row.task_loss, row.eval_accuracy)

    report = measure_diversity(params, x_eval, config.scale_mode)
    gsim = grad_similarity_loss(capture_head_gradients(params, x_eval, y_eval, "query", config.scale_mode))
    return RunArtifacts(config, metrics, report, gsim, params)


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
