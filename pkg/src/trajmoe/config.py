"""Model and training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

ABLATIONS = (
    "full",
    "remove_adapted_gate",
    "remove_time_gate",
    "remove_traj_gate",
    "remove_moe_keep_fused",
    "remove_fused_expert",
)

# flag pairs that leave no valid computation when combined
_CONTRADICTORY = (
    {"remove_time_gate", "remove_traj_gate"},
    {"remove_moe_keep_fused", "remove_fused_expert"},
)

STREAMS = ("poi", "pos", "pop", "traj")
TOD_SLOTS = 48
DOW_DAYS = 7
STAY_BUCKETS = 49
RANK_BUCKETS = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    poi_categories: int = 8
    rank_buckets: int = RANK_BUCKETS
    cross_layers: int = 2
    cross_mode: str = "vector"  # "vector" (scalar gate) or "matrix"
    deep_hidden: int | None = None  # default 2d
    expert_hidden: int | None = None  # default 2d
    share_attention: bool = False
    routing: str = "hard"  # "hard" (straight-through) or "soft"
    ablation: tuple[str, ...] = ()
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"head count {self.heads} does not divide model dim {self.d}")
        if self.cross_mode not in ("vector", "matrix"):
            raise ConfigError(f"cross_mode must be 'vector' or 'matrix', got {self.cross_mode!r}")
        if self.routing not in ("hard", "soft"):
            raise ConfigError(f"routing must be 'hard' or 'soft', got {self.routing!r}")
        flags = set(self.ablation)
        unknown = flags - set(ABLATIONS[1:])
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        for pair in _CONTRADICTORY:
            if pair <= flags:
                raise ConfigError(f"contradictory ablation flags: {sorted(pair)}")
        if self.layers < 1 or self.poi_categories < 1 or self.rank_buckets < 1:
            raise ConfigError("layers, poi_categories and rank_buckets must be positive")

    @property
    def deep_dim(self) -> int:
        return self.deep_hidden or 2 * self.d

    @property
    def expert_dim(self) -> int:
        return self.expert_hidden or 2 * self.d

    def has(self, flag: str) -> bool:
        return flag in self.ablation

    @property
    def uses_moe(self) -> bool:
        return not self.has("remove_moe_keep_fused")

    @property
    def uses_traj_gate(self) -> bool:
        return self.uses_moe and not self.has("remove_traj_gate")

    @property
    def uses_time_gate(self) -> bool:
        return self.uses_moe and not self.has("remove_time_gate")

    @property
    def uses_router(self) -> bool:
        return self.uses_traj_gate and self.uses_time_gate and not self.has("remove_adapted_gate")

    @property
    def uses_fused_expert(self) -> bool:
        return not self.has("remove_fused_expert")

    def experts(self) -> tuple[str, ...]:
        """Expert names in stacking order."""
        names = list(STREAMS[:3]) if self.uses_moe else []
        if self.uses_fused_expert:
            names.append("traj")
        return tuple(names)

    def with_variant(self, variant: str) -> "ModelConfig":
        if variant not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        return dataclasses.replace(self, ablation=() if variant == "full" else (variant,))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablation"] = list(self.ablation)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["ablation"] = tuple(data.get("ablation", ()))
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 50
    finetune_epochs: int = 1
    patience: int = 3
    seed: int = 0
    T: int = 24
    weight_decay: float = 0.01
    loss_positions: str = "all"  # "all" or "last"
    city_sampling: str = "uniform"  # "uniform" or "proportional"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.loss_positions not in ("all", "last"):
            raise ConfigError(f"loss_positions must be 'all' or 'last', got {self.loss_positions!r}")
        if self.city_sampling not in ("uniform", "proportional"):
            raise ConfigError(f"city_sampling must be 'uniform' or 'proportional', got {self.city_sampling!r}")
        if self.T < 2:
            raise ConfigError("T must be >= 2")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["model"] = ModelConfig.from_dict(data.get("model", {}))
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k: changes.pop(k) for k in list(changes) if k in ModelConfig.__dataclass_fields__}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **changes)
