"""Run configuration: one JSON document covering every pipeline stage, with
strict unknown-key rejection and a stable content hash stamped onto
artifacts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .dal import DalConfig
from .deploy import CameraModel, DistillConfig, FusionConfig
from .evaluation import CompletionThresholds
from .planner import PlannerConfig
from .rl import PpoConfig, ResidualBounds, RewardWeights


@dataclass
class DataConfig:
    per_category: int = 10
    steps: int = 200

    def __post_init__(self):
        if self.per_category < 1 or self.steps < 2:
            raise ValueError("per_category must be >= 1 and steps >= 2")


@dataclass
class SuiteConfig:
    seeds: int = 10
    rotation_rule: str = "dimscaled"
    grace_steps: int = 40
    noise: bool = True
    mpc_horizon: int = 10
    mpc_samples: int = 64
    mpc_sigma: float = 0.3


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = one per available core
    data: DataConfig = field(default_factory=DataConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    dal: DalConfig = field(default_factory=DalConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    thresholds: CompletionThresholds = field(default_factory=CompletionThresholds)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    suite: SuiteConfig = field(default_factory=SuiteConfig)


# nested dataclass types by (globally unique) field name
_SUBTYPES = {
    "data": DataConfig,
    "planner": PlannerConfig,
    "ppo": PpoConfig,
    "dal": DalConfig,
    "distill": DistillConfig,
    "thresholds": CompletionThresholds,
    "fusion": FusionConfig,
    "camera": CameraModel,
    "suite": SuiteConfig,
    "reward_weights": RewardWeights,
    "residual": ResidualBounds,
}
_TUPLE_FIELDS = {"hidden"}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object at {path}, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown config keys at {path}: {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        sub = _SUBTYPES.get(f.name)
        if sub is not None:
            v = _build(sub, v, f"{path}.{f.name}")
        elif f.name in _TUPLE_FIELDS:
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def default_config() -> RunConfig:
    return RunConfig()


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "$")


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def canonical_json(cfg) -> str:
    doc = asdict(cfg) if is_dataclass(cfg) else cfg
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    """Stable digest of the canonicalized config document."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def stamp_artifact(path: str, cfg: RunConfig) -> None:
    """Write the provenance sidecar (config hash + seed) next to an
    artifact."""
    with open(path + ".stamp.json", "w") as fh:
        json.dump({"config_hash": config_hash(cfg), "seed": cfg.seed}, fh)
        fh.write("\n")
