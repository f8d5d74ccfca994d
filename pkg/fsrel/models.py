# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Configuration models for fsrel experiments.

A single JSON file validates into ExperimentConfig; every randomness source is
named in its ``seeds`` block.
"""

from datetime import datetime
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from fsrel.utils import canonical_json, sha256_hex

PromptMode = Literal["learnable", "fixed", "none"]
MetricMode = Literal["average", "reweight"]
Task = Literal["PredCls", "SGCls"]


class ConfigBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModePool(ConfigBlock):
    subjects: List[str]
    objects: List[str]


class WorldConfig(ConfigBlock):
    """Synthetic polysemous world. Validation of pools and mode counts happens in the generator."""

    n_categories: int = 24
    n_predicates: int = 18
    modes: Union[int, List[int]] = 1
    pool_size: int = 2
    mode_pools: Optional[Dict[str, List[ModePool]]] = None
    separation: float = 4.0
    noise: float = 0.5
    appearance_dim: int = 32
    n_images: int = 600
    triplets_per_image: int = 3
    distractors_per_image: int = 1
    frequency_decay: float = 0.0
    layout_jitter: float = 0.02


class EpisodeConfig(ConfigBlock):
    n_categories: int = Field(4, ge=1)
    support_min: int = Field(1, ge=1)
    support_max: int = Field(5, ge=1)
    query_min: int = Field(2, ge=1)
    query_max: int = Field(8, ge=1)
    background_ratio: int = Field(2, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "EpisodeConfig":
        if self.support_min > self.support_max:
            raise ValueError("support_min must not exceed support_max")
        if self.query_min > self.query_max:
            raise ValueError("query_min must not exceed query_max")
        return self


class ModelConfig(ConfigBlock):
    appearance_dim: int = Field(32, gt=0)
    visual_dim: int = Field(128, gt=0)
    context_dim: int = Field(128, gt=0)
    text_dim: int = Field(64, gt=0)
    prototype_dim: int = Field(64, gt=0)
    final_dim: int = Field(128, gt=0)
    hidden_dim: int = Field(128, gt=0)
    prompt_length: int = Field(24, ge=1)
    label_prompt_length: int = Field(5, ge=1)
    prompt_mode: PromptMode = "learnable"
    metric_mode: MetricMode = "reweight"
    freeze_text_encoder: bool = True
    background_init: float = 1.0
    init_std: float = Field(0.02, gt=0)
    precision: Literal["float32", "float64"] = "float32"

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.model_dump(mode="json")))


class TrainingConfig(ConfigBlock):
    steps: int = Field(2000, ge=0)
    lr: float = Field(1e-3, ge=0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    label_refresh_every: int = Field(100, ge=1)
    use_kl: bool = True
    use_obj: bool = True


class SplitConfig(ConfigBlock):
    n_base: int = Field(12, ge=0)
    n_novel: int = Field(6, ge=0)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    # pinned novel predicates; the frequency ranking fills the base side from the rest
    novel: Optional[List[str]] = None

    @model_validator(mode="after")
    def _check_pinned(self) -> "SplitConfig":
        if self.novel is not None and len(set(self.novel)) != self.n_novel:
            raise ValueError(f"split.novel lists {len(set(self.novel))} distinct predicates, n_novel is {self.n_novel}")
        return self


class EvaluationConfig(ConfigBlock):
    task: Task = "PredCls"
    shots: List[int] = [1, 5, 10]
    recall_at: List[int] = [20, 50, 100]

    @model_validator(mode="after")
    def _check_lists(self) -> "EvaluationConfig":
        if not self.shots or any(k < 1 for k in self.shots):
            raise ValueError("shots must be positive integers")
        if not self.recall_at or any(k < 1 for k in self.recall_at):
            raise ValueError("recall_at must be positive integers")
        self.recall_at = sorted(set(self.recall_at))
        return self


class SeedConfig(ConfigBlock):
    data_seed: int = 0
    split_seed: int = 0
    support_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0


class DataConfig(ConfigBlock):
    path: Optional[str] = None
    world: WorldConfig = WorldConfig()


class ExperimentConfig(ConfigBlock):
    data: DataConfig = DataConfig()
    split: SplitConfig = SplitConfig()
    episode: EpisodeConfig = EpisodeConfig()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seeds: SeedConfig = SeedConfig()

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.model_dump(mode="json")))

    def normalized(self) -> dict:
        """Normal form used for config round-trips: every field present, sorted keys."""
        return self.model_dump(mode="json")


class RunManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: str
    config_hash: str
    dataset_hash: Optional[str] = None
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: Dict[str, str] = {}
