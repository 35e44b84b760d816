"""Report files, heatmaps, run directories and run comparison.

Run directory layout::

    run/config.json
    run/metrics.csv
    run/report.csv
    run/similarity_L{layer}_{kind}.pgm
    run/gradsim.csv
    run/params.npz

Every CSV and PGM starts with a ``#`` comment carrying the config hash and
scale mode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import HeadParams, LayerParams
from .config import config_from_dict, config_hash, config_to_dict, save_config
from .diversity import KIND_ORDER, DiversityKind, DiversityReport, LayerDiversity
from .training import MetricRow, ModelParams, RunArtifacts, TrainConfig, sinusoidal_positions

log = logging.getLogger(__name__)

__all__ = [
    "ArtifactError",
    "provenance",
    "format_value",
    "report_csv_text",
    "export_report_csv",
    "read_report_csv",
    "heatmap_pixels",
    "export_heatmap",
    "read_pgm",
    "export_metrics_csv",
    "read_metrics_csv",
    "export_gradsim_csv",
    "read_gradsim_csv",
    "save_params",
    "load_params",
    "write_run",
    "write_heatmaps",
    "load_run",
    "Comparison",
    "compare_runs",
]

# Full-scale reference for the attention-probability loss: baseline vs trained.
REFERENCE_ATTENTION_LOSS = (6.0, 0.4)


class ArtifactError(OSError):
    """A run artifact is missing or unreadable; the message names the file."""


def provenance(cfg: TrainConfig | None) -> str:
    if cfg is None:
        return "# config_hash=none scale_mode=unknown"
    return f"# config_hash={config_hash(cfg)} scale_mode={cfg.scale_mode}"


def format_value(v: float) -> str:
    return f"{v:.6f}"


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise ArtifactError(f"cannot write {path}: {e.strerror or e}") from None


def _read(path: Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ArtifactError(f"cannot read {path}: {e.strerror or e}") from None


def report_csv_text(report: DiversityReport, header: str = provenance(None)) -> str:
    """``layer,kind,loss`` rows, then ``ALL`` rows summing each kind over layers.

    ``ALL`` sums the rounded per-layer values, so re-summing a parsed file
    reproduces it.
    """
    buf = io.StringIO()
    buf.write(header.rstrip("\n") + "\n")
    buf.write("layer,kind,loss\n")
    kinds = report.kinds()
    totals = {k: 0.0 for k in kinds}
    for li, layer in enumerate(report.per_layer):
        for k in kinds:
            s = format_value(layer.per_kind[k])
            totals[k] += float(s)
            buf.write(f"{li},{k.value},{s}\n")
    for k in kinds:
        buf.write(f"ALL,{k.value},{format_value(totals[k])}\n")
    return buf.getvalue()


def export_report_csv(report: DiversityReport, path, config: TrainConfig | None = None,
                      header: str | None = None) -> Path:
    path = Path(path)
    _write(path, report_csv_text(report, header or provenance(config)))
    return path


def read_report_csv(path) -> tuple[DiversityReport, dict[DiversityKind, float], str]:
    """Parse a report file into ``(report, all_rows, header_comment)``.

    The returned report has losses only; similarity matrices are not stored in CSV.
    """
    path = Path(path)
    text = _read(path)
    lines = text.splitlines()
    header = lines[0] if lines and lines[0].startswith("#") else ""
    body = [l for l in lines if not l.startswith("#")]
    try:
        rows = list(csv.reader(body))
        if rows[0] != ["layer", "kind", "loss"]:
            raise ValueError(f"unexpected header {rows[0]}")
        per_layer: dict[int, LayerDiversity] = {}
        totals = {}
        for layer, kind, loss in rows[1:]:
            k = DiversityKind.parse(kind)
            if layer == "ALL":
                totals[k] = float(loss)
            else:
                per_layer.setdefault(int(layer), LayerDiversity()).per_kind[k] = float(loss)
    except (ValueError, IndexError) as e:
        raise ArtifactError(f"corrupt report file {path}: {e}") from None
    report = DiversityReport([per_layer[i] for i in sorted(per_layer)])
    return report, totals, header


def heatmap_pixels(similarity: np.ndarray) -> np.ndarray:
    """Gray levels ``round(255 * (1 - |d|))``; entries outside [-1, 1] are clamped."""
    sim = np.asarray(similarity, dtype=np.float64)
    if np.any(np.abs(sim) > 1.0):
        log.warning("similarity entries outside [-1, 1] clamped (max |d| = %.6g)", np.abs(sim).max())
    mag = np.clip(np.abs(sim), 0.0, 1.0)
    return np.floor(255.0 * (1.0 - mag) + 0.5).astype(int)


def export_heatmap(similarity: np.ndarray, path, config: TrainConfig | None = None,
                   header: str | None = None) -> Path:
    """Write an ASCII graymap (P2), one pixel per matrix entry; black means |d| = 1."""
    path = Path(path)
    pix = heatmap_pixels(similarity)
    lines = ["P2", header or provenance(config), "# pixel = round(255 * (1 - |d|))",
             f"{pix.shape[1]} {pix.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    _write(path, "\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in _read(Path(path)).splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ArtifactError(f"{path} is not a P2 graymap")
    w, h, _ = (int(t) for t in tokens[1:4])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)


_METRIC_COLUMNS = ["step", "task_loss"] + [f"div_{k.value}" for k in KIND_ORDER] + ["eval_accuracy"]


def export_metrics_csv(metrics: list[MetricRow], path, config: TrainConfig | None = None) -> Path:
    """Full-precision (``repr``) floats so the log round-trips exactly."""
    path = Path(path)
    out = [provenance(config), ",".join(_METRIC_COLUMNS)]
    for m in metrics:
        vals = [str(m.step), repr(float(m.task_loss))]
        vals += [repr(float(m.diversity[k])) for k in KIND_ORDER]
        vals.append(repr(float(m.eval_accuracy)))
        out.append(",".join(vals))
    _write(path, "\n".join(out) + "\n")
    return path


def read_metrics_csv(path) -> list[MetricRow]:
    path = Path(path)
    body = [l for l in _read(path).splitlines() if l and not l.startswith("#")]
    try:
        if body[0].split(",") != _METRIC_COLUMNS:
            raise ValueError("unexpected header")
        rows = []
        for line in body[1:]:
            f = line.split(",")
            div = {k: float(f[2 + i]) for i, k in enumerate(KIND_ORDER)}
            rows.append(MetricRow(int(f[0]), float(f[1]), div, float(f[-1])))
    except (ValueError, IndexError) as e:
        raise ArtifactError(f"corrupt metrics file {path}: {e}") from None
    return rows


GRADSIM_NOTE = ("# grad_similarity = mean over layers of mean over the full N x N grid of (C - I)^2, "
                "C = cosines of per-head query-weight gradients on the eval set")


def export_gradsim_csv(rows: list[tuple[float, float]], path, config: TrainConfig | None = None) -> Path:
    path = Path(path)
    out = [provenance(config), GRADSIM_NOTE, "lambda,grad_similarity"]
    out += [f"{lam!r},{value!r}" for lam, value in rows]
    _write(path, "\n".join(out) + "\n")
    return path


def read_gradsim_csv(path) -> list[tuple[float, float]]:
    path = Path(path)
    body = [l for l in _read(path).splitlines() if l and not l.startswith("#")]
    try:
        return [(float(a), float(b)) for a, b in (l.split(",") for l in body[1:])]
    except ValueError as e:
        raise ArtifactError(f"corrupt gradsim file {path}: {e}") from None


def save_params(params: ModelParams, path) -> None:
    arrays = {"embed": params.embed, "classifier": params.classifier}
    for li, layer in enumerate(params.attention_layers):
        arrays[f"L{li}_w_out"] = layer.w_out
        for hi, (p, _) in enumerate(layer.heads):
            arrays[f"L{li}_H{hi}_w_query"] = p.w_query
            arrays[f"L{li}_H{hi}_w_key"] = p.w_key
            arrays[f"L{li}_H{hi}_w_value"] = p.w_value
    np.savez(path, **arrays)


def load_params(path, config: TrainConfig) -> ModelParams:
    try:
        with np.load(path) as z:
            layers = []
            for li in range(config.layers):
                heads = [(HeadParams(z[f"L{li}_H{hi}_w_query"], z[f"L{li}_H{hi}_w_key"],
                                     z[f"L{li}_H{hi}_w_value"]), mech)
                         for hi, mech in enumerate(config.mechanisms)]
                layers.append(LayerParams(heads, z[f"L{li}_w_out"]))
            embed, classifier = z["embed"], z["classifier"]
    except (OSError, KeyError, ValueError) as e:
        raise ArtifactError(f"cannot load parameters from {path}: {e}") from None
    return ModelParams(embed, layers, classifier,
                       sinusoidal_positions(config.task.seq_len, config.model_dim))


def write_heatmaps(report: DiversityReport, out_dir, config: TrainConfig | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for li, layer in enumerate(report.per_layer):
        for kind, sim in layer.similarity.items():
            paths.append(export_heatmap(sim, out_dir / f"similarity_L{li}_{kind.value}.pgm", config))
    return paths


def write_run(run: RunArtifacts, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = run.config
    save_config(cfg, out_dir / "config.json")
    export_metrics_csv(run.metrics, out_dir / "metrics.csv", cfg)
    export_report_csv(run.report, out_dir / "report.csv", cfg)
    write_heatmaps(run.report, out_dir, cfg)
    export_gradsim_csv([(cfg.lam, run.grad_similarity)], out_dir / "gradsim.csv", cfg)
    save_params(run.params, out_dir / "params.npz")
    return out_dir


def load_run(run_dir) -> RunArtifacts:
    """Load a run directory; the report carries losses only (no similarity matrices)."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    try:
        cfg = config_from_dict(json.loads(_read(cfg_path)))
    except (json.JSONDecodeError, ValueError) as e:
        raise ArtifactError(f"corrupt config file {cfg_path}: {e}") from None
    metrics = read_metrics_csv(run_dir / "metrics.csv")
    report, _, _ = read_report_csv(run_dir / "report.csv")
    gsim = read_gradsim_csv(run_dir / "gradsim.csv")
    if not gsim:
        raise ArtifactError(f"empty gradsim file {run_dir / 'gradsim.csv'}")
    params = load_params(run_dir / "params.npz", cfg)
    return RunArtifacts(cfg, metrics, report, gsim[0][1], params)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


@dataclass(frozen=True)
class Comparison:
    """``ratios[kind] = a / b`` of layer-summed losses; deltas are ``a - b``."""

    ratios: dict
    losses_a: dict
    losses_b: dict
    accuracy_a: float
    accuracy_b: float
    grad_similarity_a: float
    grad_similarity_b: float

    @property
    def accuracy_delta(self) -> float:
        return self.accuracy_a - self.accuracy_b

    @property
    def grad_similarity_delta(self) -> float:
        return self.grad_similarity_a - self.grad_similarity_b

    def to_csv(self) -> str:
        lines = ["metric,a,b,value"]
        for k, r in self.ratios.items():
            lines.append(f"ratio_{k.value},{self.losses_a[k]!r},{self.losses_b[k]!r},{r!r}")
        lines.append(f"accuracy_delta,{self.accuracy_a!r},{self.accuracy_b!r},{self.accuracy_delta!r}")
        lines.append(f"grad_similarity_delta,{self.grad_similarity_a!r},{self.grad_similarity_b!r},"
                     f"{self.grad_similarity_delta!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = ["diversity loss summed over layers (a / b):"]
        for k, r in self.ratios.items():
            out.append(f"  {k.value}: {self.losses_a[k]:.6f} / {self.losses_b[k]:.6f} = {r:.3f}x")
        out.append(f"eval accuracy: {self.accuracy_a:.4f} vs {self.accuracy_b:.4f} "
                   f"(delta {self.accuracy_delta:+.4f})")
        out.append(f"grad similarity: {self.grad_similarity_a:.6f} vs {self.grad_similarity_b:.6f} "
                   f"(delta {self.grad_similarity_delta:+.6f})")
        base, trained = REFERENCE_ATTENTION_LOSS
        out.append(f"reference at full scale: attention-probability loss ~{base} -> ~{trained} "
                   f"({base / trained:.0f}x); not expected at toy scale")
        return "\n".join(out) + "\n"


def _shape(cfg: TrainConfig) -> tuple:
    return (cfg.layers, cfg.heads, cfg.model_dim, cfg.head_dim, cfg.task.seq_len, cfg.task.vocab)


def compare_runs(a: RunArtifacts, b: RunArtifacts) -> Comparison:
    if _shape(a.config) != _shape(b.config):
        raise ValueError(f"model shapes differ: {_shape(a.config)} vs {_shape(b.config)}")
    kinds = [k for k in a.report.kinds() if k in b.report.kinds()]
    la = {k: a.report.total(k) for k in kinds}
    lb = {k: b.report.total(k) for k in kinds}
    return Comparison(
        {k: _ratio(la[k], lb[k]) for k in kinds}, la, lb,
        a.metrics[-1].eval_accuracy, b.metrics[-1].eval_accuracy,
        a.grad_similarity, b.grad_similarity,
    )
