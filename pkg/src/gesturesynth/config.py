"""Unified run configuration: one JSON file drives every command.

Each section is its own dataclass; unknown keys are rejected at every
level so a typo in a config file fails loudly instead of silently using a
default.  The file round-trips losslessly through save/load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import CorpusConfig, toy_corpus_config
from .diffusion import NoiseSchedule, make_schedule
from .errors import ConfigError, ParseError
from .metrics import ExtractorConfig
from .model import ModelConfig, toy_config
from .training import TrainConfig


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class ScheduleConfig:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def build(self) -> NoiseSchedule:
        return make_schedule(n_steps=self.n_steps, beta_start=self.beta_start,
                             beta_end=self.beta_end, kind=self.kind)


@dataclass(frozen=True)
class SampleConfig:
    window: int = 34       # frames generated per clip
    overlap: int = 4       # crossfaded seam between consecutive clips
    variance: str = "beta"

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("sample window must be >= 2 frames")
        if not 0 <= self.overlap < self.window:
            raise ConfigError(
                f"overlap {self.overlap} must lie in [0, window {self.window})"
            )
        if self.variance not in ("beta", "posterior"):
            raise ConfigError(f"unknown variance mode {self.variance!r}")


@dataclass(frozen=True)
class EvalConfig:
    repeats: int = 10
    srgr_delta: float = 0.2
    latent_stride: int = 0  # 0 -> disjoint windows (stride = clip length)

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.srgr_delta <= 0:
            raise ConfigError("srgr_delta must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    master_seed: int = 0

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "corpus": self.corpus.to_dict(),
            "training": self.training.to_dict(),
            "extractor": asdict(self.extractor),
            "evaluation": asdict(self.evaluation),
            "sample": asdict(self.sample),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "model", "schedule", "corpus", "training", "extractor",
            "evaluation", "sample", "master_seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        if "model" in d:
            kwargs["model"] = ModelConfig.from_dict(d["model"])
        if "schedule" in d:
            kwargs["schedule"] = _from_dict(ScheduleConfig, d["schedule"])
        if "corpus" in d:
            kwargs["corpus"] = CorpusConfig.from_dict(d["corpus"])
        if "training" in d:
            kwargs["training"] = TrainConfig.from_dict(d["training"])
        if "extractor" in d:
            kwargs["extractor"] = _from_dict(ExtractorConfig, d["extractor"])
        if "evaluation" in d:
            kwargs["evaluation"] = _from_dict(EvalConfig, d["evaluation"])
        if "sample" in d:
            kwargs["sample"] = _from_dict(SampleConfig, d["sample"])
        if "master_seed" in d:
            kwargs["master_seed"] = int(d["master_seed"])
        return cls(**kwargs)

    def validate_cross_links(self):
        """Checks spanning sections: the corpus must feed the model."""
        if self.corpus.d_audio != self.model.d_audio_raw:
            raise ConfigError(
                f"corpus d_audio {self.corpus.d_audio} != model d_audio_raw "
                f"{self.model.d_audio_raw}"
            )
        if self.corpus.n_joints != self.model.n_joints:
            raise ConfigError(
                f"corpus n_joints {self.corpus.n_joints} != model n_joints "
                f"{self.model.n_joints}"
            )
        if self.corpus.n_emotions != self.model.n_emotions:
            raise ConfigError("corpus and model disagree on emotion count")
        if self.corpus.n_speakers != self.model.n_speakers:
            raise ConfigError("corpus and model disagree on speaker count")
        if self.training.window > self.model.n_max:
            raise ConfigError(
                f"training window {self.training.window} exceeds model n_max "
                f"{self.model.n_max}"
            )
        return self


def save_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}", offset=exc.pos) from exc
    return RunConfig.from_dict(data).validate_cross_links()


def toy_run_config(**overrides) -> RunConfig:
    """Desk-scale defaults: small dims, short schedule, fast smoke settings."""
    base = dict(
        model=toy_config(),
        schedule=ScheduleConfig(n_steps=50, beta_end=0.05),
        corpus=toy_corpus_config(),
        training=TrainConfig(batch_size=4, n_steps=50, lr=1e-3, seed=0),
        extractor=ExtractorConfig(clip_length=34, n_steps=300),
        evaluation=EvalConfig(repeats=2),
        sample=SampleConfig(window=34, overlap=4),
        master_seed=0,
    )
    base.update(overrides)
    return RunConfig(**base).validate_cross_links()
