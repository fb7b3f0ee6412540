"""Experiment configuration: nested dataclasses, file IO, canonical digests.

One 64-bit seed in the experiment config drives every random draw in a
run (catalog, logging cascade, candidate sampling, parameter init,
shuffling).  Configs round-trip through plain dicts so they can live in
JSON or YAML files; the digest is a SHA-256 over the canonical JSON form
and identifies a run in reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import DISTILL_SETS, LOSS_VARIANTS, LossWeights

COMBINATION_STRATEGIES = ("one_model", "ctr_x_cvr", "ctr_x_cvr_x_er")

TEACHER_MODES = ("none", "oracle", "learned")

SAMPLE_SPACES = ("entire", "exposed")


@dataclass
class SimConfig:
    """Synthetic marketplace and logging-cascade parameters."""

    n_users: int = 100
    n_queries: int = 60
    n_items: int = 2000
    n_categories: int = 20
    n_requests: int = 800
    latent_dim: int = 8

    # cascade stage sizes: matching pool -> pre-ranking output -> exposures
    matching_pool: int = 500
    prerank_size: int = 50
    exposure_cap: int = 10

    # zero-mean gaussian noise added to true relevance by each logging stage
    matching_noise: float = 0.05
    prerank_noise: float = 0.12
    ranking_noise: float = 0.04

    # event model: pClick and pPurchase|click as powers of true relevance
    click_floor: float = 0.01
    click_ceil: float = 0.45
    click_power: float = 2.5
    cvr_floor: float = 0.005
    cvr_ceil: float = 0.30
    cvr_power: float = 3.5

    # relevance model
    query_affinity: float = 2.0
    user_affinity: float = 1.0
    cross_affinity: float = 0.0
    category_bonus: float = 3.0
    relevance_offset: float = 3.0
    borderline: float = 0.5

    # out-of-scenario purchases per user per day (Poisson mean)
    other_purchase_rate: float = 0.5
    window_days: float = 14.0

    # user behavior history
    behaviors_per_user: float = 24.0
    history_days: float = 30.0

    # vocabularies
    n_profile_features: int = 3
    profile_vocab: int = 30
    term_vocab: int = 240
    terms_per_category: int = 12
    query_terms_min: int = 2
    query_terms_max: int = 4
    title_terms_min: int = 3
    title_terms_max: int = 6
    n_brands: int = 50
    n_freq_buckets: int = 8
    user_categories: int = 3
    query_categories_max: int = 2

    def validate(self) -> None:
        for name in ("n_users", "n_queries", "n_items", "n_categories", "n_requests"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.matching_pool > self.n_items:
            raise ConfigError("matching_pool cannot exceed n_items")
        if self.prerank_size > self.matching_pool:
            raise ConfigError("prerank_size cannot exceed matching_pool")
        if self.exposure_cap > 10:
            raise ConfigError("exposure_cap is capped at 10 per request")
        if self.exposure_cap < 1 or self.prerank_size < 1:
            raise ConfigError("stage sizes must be >= 1")
        if not 0.0 <= self.borderline <= 1.0:
            raise ConfigError("borderline must lie in [0, 1]")


@dataclass
class SampleConfig:
    """Entire-space training sample construction."""

    n_rank_cands: int = 10  # unexposed pre-ranking outputs drawn per query
    n_prerank_cands: int = 40  # matching-only candidates drawn per query
    teacher: str = "none"  # none | oracle | learned
    space: str = "entire"  # entire | exposed (drop unexposed items before training)

    def validate(self) -> None:
        if self.n_rank_cands < 0 or self.n_prerank_cands < 0:
            raise ConfigError("candidate counts must be >= 0")
        if self.teacher not in TEACHER_MODES:
            raise ConfigError(f"teacher mode must be one of {TEACHER_MODES}")
        if self.space not in SAMPLE_SPACES:
            raise ConfigError(f"sample space must be one of {SAMPLE_SPACES}")


@dataclass
class ModelConfig:
    """Two-tower dimensions and initialization knobs."""

    d_term: int = 16  # query/title term embedding width
    d_proj: int = 16  # user-conditioned query attention projection width
    d_profile: int = 8
    d_item_id: int = 16
    d_category: int = 8
    d_brand: int = 8
    d_freq: int = 8
    hidden: tuple[int, ...] = (128, 64, 32)
    out_dim: int = 32
    temperature: float = 0.05
    lrelu_slope: float = 0.01
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d_proj != self.d_term:
            # the personalized query attention dots the projected user vector
            # against term embeddings, which forces equal widths
            raise ConfigError("d_proj must equal d_term")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if len(self.hidden) != 3:
            raise ConfigError("towers use exactly three hidden layers")

    @property
    def d_behavior(self) -> int:
        return self.d_item_id + self.d_category


@dataclass
class LossConfig:
    """Objective selection: task weights, loss variant, distillation set."""

    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "multi_positive"
    distill_set: str = "none"  # none | ex | ex_rc | ex_rc_prc
    distill_weight: float = 0.5  # scales the soft-label term against the rank loss

    def validate(self) -> None:
        try:
            self.weights.validate(training=True)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss variant must be one of {LOSS_VARIANTS}")
        if self.distill_set not in DISTILL_SETS:
            raise ConfigError(f"distill_set must be one of {DISTILL_SETS}")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 64
    epochs: int = 10
    determinism: bool = True

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("invalid training hyperparameters")


@dataclass
class TeacherConfig:
    """Learned teacher: joint-feature network trained pointwise on exposures."""

    emb_dim: int = 8
    hidden: tuple[int, ...] = (96, 48)
    learning_rate: float = 5e-3
    batch_size: int = 256
    epochs: int = 40
    lrelu_slope: float = 0.01
    weight_decay: float = 1e-4  # keeps head logits bounded on small-count items
    # a deployed ranker predates the pre-ranker and has its own, much
    # longer exposure history; 0 trains on the shared log window instead
    n_own_requests: int = 4000
    explore_rate: float = 0.1  # exploration-slot share in the teacher's own window
    # item click/purchase rate features are counted over a longer span
    # than the gradient steps can afford, the usual serving-side split;
    # 0 falls back to counting over the training window itself
    n_rate_requests: int = 32000
    rate_bins: int = 16

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("invalid teacher hyperparameters")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.n_own_requests < 0 or self.n_rate_requests < 0:
            raise ConfigError("request window sizes must be >= 0")
        if self.rate_bins < 2:
            raise ConfigError("rate_bins must be >= 2")
        if not 0.0 <= self.explore_rate <= 1.0:
            raise ConfigError("explore_rate must lie in [0, 1]")


@dataclass
class EvalConfig:
    k_grid: tuple[int, ...] = (1, 2, 5, 10, 20, 50, 100, 200)
    k_eval: int = 50  # headline set-quality cut, the pre-ranking output size
    inject_targets: bool = True

    def validate(self) -> None:
        if list(self.k_grid) != sorted(set(self.k_grid)) or any(k < 1 for k in self.k_grid):
            raise ConfigError("k_grid must be strictly increasing positive integers")
        if self.k_eval < 1:
            raise ConfigError("k_eval must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 20240901
    sim: SimConfig = field(default_factory=SimConfig)
    samples: SampleConfig = field(default_factory=SampleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    combination: str = "one_model"

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        for section in (self.sim, self.samples, self.model, self.loss, self.train, self.teacher, self.eval):
            section.validate()
        if self.combination not in COMBINATION_STRATEGIES:
            raise ConfigError(f"combination must be one of {COMBINATION_STRATEGIES}")
        if self.eval.k_eval > self.sim.matching_pool:
            raise ConfigError("k_eval cannot exceed the matching pool size")
        return self

    # ------------------------------------------------------------------
    # dict / file round trip

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        def build(dc_type, payload):
            if payload is None:
                return dc_type()
            names = {f.name for f in dataclasses.fields(dc_type)}
            kwargs = {}
            for key, value in payload.items():
                if key not in names:
                    raise ConfigError(f"unknown config key {key!r} for {dc_type.__name__}")
                if key in _NESTED and isinstance(value, dict):
                    value = build(_NESTED[key], value)
                elif isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
            return dc_type(**kwargs)

        cfg = build(cls, data)
        return cfg.validate()

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_NESTED = {
    "sim": SimConfig,
    "samples": SampleConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "teacher": TeacherConfig,
    "eval": EvalConfig,
    "weights": LossWeights,
}


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
