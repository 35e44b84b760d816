"""JSON form of :class:`TrainConfig`.

Every key is optional and falls back to the default listed in
:data:`DEFAULTS`; unknown keys are rejected. ``mechanisms`` is either the
string ``"softmax"`` (all heads full-context softmax) or a list of objects::

    {"type": "softmax"}
    {"type": "window", "left": 4, "right": 4}
    {"type": "favor", "num_features": 64, "feature_seed": 0}

Any entry may carry ``"count": n`` to repeat it ``n`` times.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .attention import Favor, SoftmaxFull, SoftmaxWindow
from .diversity import DiversityKind
from .training import SyntheticTaskSpec, TrainConfig

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
    "load_config",
    "save_config",
    "describe_keys",
]


class ConfigError(ValueError):
    """Invalid config document; the message names the offending key."""


def _mech_to_dict(m) -> dict:
    if isinstance(m, SoftmaxFull):
        return {"type": "softmax"}
    if isinstance(m, SoftmaxWindow):
        return {"type": "window", "left": m.left, "right": m.right}
    if isinstance(m, Favor):
        return {"type": "favor", "num_features": m.num_features, "feature_seed": m.feature_seed}
    raise TypeError(f"unknown mechanism {m!r}")


def config_to_dict(cfg: TrainConfig) -> dict:
    t = cfg.task
    return {
        "layers": cfg.layers,
        "heads": cfg.heads,
        "model_dim": cfg.model_dim,
        "head_dim": cfg.head_dim,
        "mechanisms": [_mech_to_dict(m) for m in cfg.mechanisms],
        "diversity_kind": None if cfg.diversity_kind is None else cfg.diversity_kind.value,
        "lambda": cfg.lam,
        "scale_mode": cfg.scale_mode,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "log_interval": cfg.log_interval,
        "task": {
            "seq_len": t.seq_len,
            "vocab": t.vocab,
            "offsets": list(t.offsets),
            "num_train": t.num_train,
            "num_eval": t.num_eval,
        },
    }


DEFAULTS = config_to_dict(TrainConfig())
DEFAULTS["mechanisms"] = "softmax"

_INT_KEYS = {"layers", "heads", "model_dim", "head_dim", "steps", "batch_size", "seed", "log_interval"}
_FLOAT_KEYS = {"lambda", "learning_rate"}
_TASK_INT_KEYS = {"seq_len", "vocab", "num_train", "num_eval"}
_MECH_KEYS = {
    "softmax": {"type", "count"},
    "window": {"type", "count", "left", "right"},
    "favor": {"type", "count", "num_features", "feature_seed"},
}


def _int(value, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return value


def _float(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    return float(value)


def _mechanisms(value, heads: int):
    if value == "softmax" or value is None:
        return (SoftmaxFull(),) * heads
    if not isinstance(value, list):
        raise ConfigError(f"mechanisms: expected \"softmax\" or a list, got {value!r}")
    out = []
    for i, entry in enumerate(value):
        where = f"mechanisms[{i}]"
        if not isinstance(entry, dict) or "type" not in entry:
            raise ConfigError(f"{where}: expected an object with a \"type\" key")
        kind = entry["type"]
        if kind not in _MECH_KEYS:
            raise ConfigError(f"{where}.type: unknown mechanism {kind!r}")
        for k in entry:
            if k not in _MECH_KEYS[kind]:
                raise ConfigError(f"{where}.{k}: unknown key for {kind} mechanism")
        count = _int(entry.get("count", 1), f"{where}.count")
        try:
            if kind == "softmax":
                mech = SoftmaxFull()
            elif kind == "window":
                mech = SoftmaxWindow(_int(entry.get("left", 0), f"{where}.left"),
                                     _int(entry.get("right", 0), f"{where}.right"))
            else:
                mech = Favor(_int(entry.get("num_features", 64), f"{where}.num_features"),
                             _int(entry.get("feature_seed", 0), f"{where}.feature_seed"))
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from None
        out.extend([mech] * count)
    return tuple(out)


def config_from_dict(doc: dict, seed: int | None = None) -> TrainConfig:
    """Build a validated config; ``seed`` overrides the document's seed."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in DEFAULTS:
            raise ConfigError(f"{key}: unknown config key")
    merged = {**DEFAULTS, **doc}
    task_doc = merged["task"]
    if not isinstance(task_doc, dict):
        raise ConfigError("task: expected an object")
    for key in task_doc:
        if key not in DEFAULTS["task"]:
            raise ConfigError(f"task.{key}: unknown config key")
    task_doc = {**DEFAULTS["task"], **task_doc}

    kwargs = {}
    for key in _INT_KEYS:
        kwargs[key] = _int(merged[key], key)
    lam = _float(merged["lambda"], "lambda")
    lr = _float(merged["learning_rate"], "learning_rate")
    if seed is not None:
        kwargs["seed"] = seed
    kind = merged["diversity_kind"]
    if kind is not None:
        try:
            kind = DiversityKind.parse(kind)
        except ValueError as e:
            raise ConfigError(f"diversity_kind: {e}") from None
    if merged["scale_mode"] not in ("paper", "standard"):
        raise ConfigError(f"scale_mode: expected \"paper\" or \"standard\", got {merged['scale_mode']!r}")
    offsets = task_doc["offsets"]
    if not isinstance(offsets, list):
        raise ConfigError("task.offsets: expected a list of integers")
    try:
        task = SyntheticTaskSpec(
            offsets=tuple(_int(o, "task.offsets") for o in offsets),
            **{k: _int(task_doc[k], f"task.{k}") for k in _TASK_INT_KEYS},
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"task: {e}") from None
    mechs = _mechanisms(merged["mechanisms"], kwargs["heads"])
    if len(mechs) != kwargs["heads"]:
        raise ConfigError(f"mechanisms: {len(mechs)} entries for heads={kwargs['heads']}")
    if lam != 0 and kind is None:
        raise ConfigError("lambda: must be 0 when diversity_kind is null")
    try:
        return TrainConfig(mechanisms=mechs, diversity_kind=kind, lam=lam, learning_rate=lr,
                           scale_mode=merged["scale_mode"], task=task, **kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path, seed: int | None = None) -> TrainConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return config_from_dict(doc, seed=seed)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def describe_keys() -> str:
    """One line per config key with its default, for ``--help``."""
    lines = []
    for key, value in DEFAULTS.items():
        if key == "task":
            for tk, tv in value.items():
                lines.append(f"  task.{tk} = {json.dumps(tv)}")
        else:
            lines.append(f"  {key} = {json.dumps(value)}")
    return "\n".join(lines)
