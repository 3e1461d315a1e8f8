"""Experiment configuration: JSON blocks, defaults, validation and ablation presets."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .numerics import ConfigurationError


@dataclass
class DataConfig:
    classes: int = 10
    dims: int = 16
    per_class: int = 600
    separation: float = 5.0
    seen_fraction: float = 0.6
    labeled_fraction: float = 0.5
    clients: int = 4
    gu_per_client: int = 1
    lu_per_client: int = 1
    gu_clients: list[int] | None = field(default_factory=lambda: [0, 1])
    test_fraction: float = 1 / 6
    dirichlet_alpha: float | None = None
    csv_path: str | None = None


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16
    activation: str = "tanh"
    freeze_extractor_below: int = 0


@dataclass
class ObjectiveConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau: float = 0.5
    temperature: float = 0.1
    decay: float = 0.9
    rho_inverse: bool = False
    stop_gradient_on_target: bool = False
    calibration_ce: bool = True
    calibration_cluster: bool = True


@dataclass
class ClusteringConfig:
    local_centroids: int = 32
    global_centroids: int | None = None  # None: one per classifier output
    epsilon: float | None = None  # None: scale-adaptive policy
    lloyd_rounds: int = 10
    sinkhorn_iters: int = 500
    tolerance: float = 1e-6
    kmeans_fallback: bool = False
    normalize_features: bool = False
    align_to_classifier: bool = True


@dataclass
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 5
    participation: float = 1.0
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class EvaluationConfig:
    match_all_labels: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    output_dir: str | None = None
    preset: str = "full"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"objective.beta": 0.5})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(d, key, value)
        return from_dict(d)


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "minus_R": {"objective.beta": 0.0},
    "minus_R_minus_ce": {"objective.beta": 0.0, "objective.calibration_ce": False},
    "base": {"objective.beta": 0.0, "objective.gamma": 0.0},
}


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.replace(**PRESETS[name], preset=name)


_BLOCKS = {
    "data": DataConfig,
    "model": ModelConfig,
    "objective": ObjectiveConfig,
    "clustering": ClusteringConfig,
    "federation": FederationConfig,
    "evaluation": EvaluationConfig,
}
_TOP_LEVEL = {"seed": int, "output_dir": (str, type(None)), "preset": str}


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigurationError(f"unknown config key {key!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigurationError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def _type_ok(value, annotation: str) -> bool:
    if value is None:
        return "None" in annotation
    if annotation.startswith("list"):
        return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if annotation.startswith("bool"):
        return isinstance(value, bool)
    if annotation.startswith("int"):
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation.startswith("float"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation.startswith("str"):
        return isinstance(value, str)
    return True


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate; every problem is reported at once with its key path."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    blocks = {}
    for key in raw:
        if key not in _BLOCKS and key not in _TOP_LEVEL:
            errors.append(f"{key}: unknown key")
    for name, cls in _BLOCKS.items():
        given = raw.get(name, {}) or {}
        if not isinstance(given, dict):
            errors.append(f"{name}: expected an object")
            given = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in given.items():
            if k not in fields:
                errors.append(f"{name}.{k}: unknown key")
            elif not _type_ok(v, str(fields[k].type)):
                errors.append(f"{name}.{k}: expected {fields[k].type}, got {type(v).__name__}")
            else:
                kwargs[k] = float(v) if str(fields[k].type).startswith("float") and v is not None else v
        blocks[name] = cls(**kwargs)
    top = {}
    for k, types in _TOP_LEVEL.items():
        if k in raw:
            if not isinstance(raw[k], types) or isinstance(raw[k], bool):
                errors.append(f"{k}: bad type {type(raw[k]).__name__}")
            else:
                top[k] = raw[k]
    cfg = ExperimentConfig(**blocks, **top)
    errors += _constraints(cfg)
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _constraints(cfg: ExperimentConfig) -> list[str]:
    e = []
    d, m, o, c, f = cfg.data, cfg.model, cfg.objective, cfg.clustering, cfg.federation

    def need(ok, msg):
        if not ok:
            e.append(msg)

    need(d.classes >= 2, "data.classes: must be >= 2")
    need(d.dims >= 2, "data.dims: must be >= 2")
    need(d.per_class >= 2, "data.per_class: must be >= 2")
    need(d.separation > 0, "data.separation: must be > 0")
    need(0 < d.seen_fraction < 1, "data.seen_fraction: must be in (0, 1)")
    need(0 < d.labeled_fraction < 1, "data.labeled_fraction: must be in (0, 1)")
    need(d.clients >= 1, "data.clients: must be >= 1")
    need(d.gu_per_client >= 0, "data.gu_per_client: must be >= 0")
    need(d.lu_per_client >= 0, "data.lu_per_client: must be >= 0")
    need(0 < d.test_fraction < 1, "data.test_fraction: must be in (0, 1)")
    need(d.dirichlet_alpha is None or d.dirichlet_alpha > 0, "data.dirichlet_alpha: must be > 0")
    need(all(w >= 1 for w in m.hidden), "model.hidden: widths must be >= 1")
    need(m.feature_dim >= 1, "model.feature_dim: must be >= 1")
    need(m.activation in ("tanh", "identity"), "model.activation: must be 'tanh' or 'identity'")
    need(0 <= m.freeze_extractor_below <= len(m.hidden) + 1,
         "model.freeze_extractor_below: must index an extractor layer")
    for k in ("alpha", "beta", "gamma"):
        need(getattr(o, k) >= 0, f"objective.{k}: must be >= 0")
    need(0 < o.tau <= 1, "objective.tau: must be in (0, 1]")
    need(o.temperature > 0, "objective.temperature: must be > 0")
    need(0 <= o.decay < 1, "objective.decay: must be in [0, 1)")
    need(c.local_centroids >= 1, "clustering.local_centroids: must be >= 1")
    need(c.global_centroids is None or c.global_centroids >= 1, "clustering.global_centroids: must be >= 1")
    need(c.global_centroids is None or d.csv_path is not None or c.global_centroids == d.classes,
         "clustering.global_centroids: must equal the classifier width (data.classes)")
    need(c.epsilon is None or c.epsilon > 0, "clustering.epsilon: must be > 0")
    need(c.lloyd_rounds >= 1, "clustering.lloyd_rounds: must be >= 1")
    need(c.sinkhorn_iters >= 1, "clustering.sinkhorn_iters: must be >= 1")
    need(c.tolerance > 0, "clustering.tolerance: must be > 0")
    need(f.rounds >= 0, "federation.rounds: must be >= 0")
    need(f.local_epochs >= 1, "federation.local_epochs: must be >= 1")
    need(0 < f.participation <= 1, "federation.participation: must be in (0, 1]")
    need(f.batch_size >= 2, "federation.batch_size: must be >= 2")
    need(f.learning_rate >= 0, "federation.learning_rate: must be >= 0")
    need(0 <= f.momentum < 1, "federation.momentum: must be in [0, 1)")
    need(f.weight_decay >= 0, "federation.weight_decay: must be >= 0")
    need(cfg.preset in PRESETS, f"preset: unknown {cfg.preset!r}")
    return e


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; an empty file means all defaults."""
    text = Path(path).read_text()
    if not text.strip():
        return ExperimentConfig()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def participation_count(clients: int, participation: float) -> int:
    # guard against 0.5 * 10 = 5.000000000000001 style rounding
    return max(1, min(clients, math.ceil(participation * clients - 1e-9)))
