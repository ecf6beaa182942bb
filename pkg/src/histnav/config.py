"""Run configuration: one canonical-JSON document with a schema version,
validated strictly (unknown keys are errors) so reruns are reproducible from
the file alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .world import TASK_KINDS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _from_dict(cls, obj: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class WorldSection:
    n_nodes: int = 20
    k_neighbors: int = 3
    seen_worlds: int = 12
    unseen_worlds: int = 12
    success_radius: float = 1.0


@dataclass
class DataSection:
    task: str = "fine_grained"
    train_episodes: int = 2000
    val_episodes: int = 120
    hop_min: int = 2
    hop_max: int = 4

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task!r}")


@dataclass
class PretrainSection:
    stage1_iters: int = 6000
    stage2_iters: int = 2000
    batch_size: int = 4
    lr_stage1: float = 1e-3
    lr_stage2: float = 5e-4
    view_lr_mult: float = 5.0
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    mlm_rate: float = 0.15
    mrm_rate: float = 0.15
    sprel_zero_rate: float = 0.3
    task_ratio: dict = field(default_factory=lambda: {
        "mlm": 5, "mrm": 2, "itm": 2, "sap": 1, "sar": 1, "sprel": 1})


@dataclass
class FinetuneSection:
    iters: int = 8000
    batch_size: int = 1
    lr: float = 3e-4
    il_weight: float = 0.2
    discount: float = 0.9
    critic_weight: float = 0.5
    entropy_weight: float = 0.0
    success_reward: float = 2.0
    max_steps: int = 15
    grad_clip: float = 5.0
    weight_decay: float = 0.01
    freeze_unimodal: bool = True
    eval_every: int = 500
    eval_episodes: int = 60


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 7
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    world: WorldSection = field(default_factory=WorldSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; "
                              f"this build reads version {SCHEMA_VERSION}")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig keys: {sorted(unknown)}")
        if "model" in obj:
            try:
                obj["model"] = ModelConfig.from_dict(obj["model"])
            except ValueError as e:
                raise ConfigError(str(e)) from e
        for key, section in (("world", WorldSection), ("data", DataSection),
                             ("pretrain", PretrainSection), ("finetune", FinetuneSection)):
            if key in obj:
                obj[key] = _from_dict(section, obj[key])
        return cls(**obj)

    def to_canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    try:
        return RunConfig.from_dict(obj)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(json.loads(config.to_canonical_json()), f, indent=2, sort_keys=True)
        f.write("\n")
