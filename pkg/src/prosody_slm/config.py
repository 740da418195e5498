"""Experiment configuration: strict schema, YAML I/O and environment overrides.

Any field can be overridden from the environment with
``PSLM__<section>__<field>[__<subfield>]=<yaml scalar>``, e.g.
``PSLM__reconstructor__lambda_mel=2.0`` or ``PSLM__backbone__stage2__epochs=3``.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

STAGES = ("gen-data", "train-encoder", "probe", "build-kd-data", "train-backbone", "evaluate", "report")
ENV_PREFIX = "PSLM__"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class DataSection(_Strict):
    n_items: int = Field(2000, ge=1)
    min_len: int = Field(4, ge=1)
    max_len: int = Field(8, ge=1)
    n_speakers: int = Field(8, ge=1)
    n_pitch: int = Field(3, ge=1)
    n_energy: int = Field(3, ge=1)
    n_emotion: int = Field(4, ge=1)
    phrase_prob: float = Field(0.3, ge=0, le=1)
    fractions: list[float] = [0.8, 0.1, 0.1]
    workers: int = Field(1, ge=1)


class RenderSection(_Strict):
    n_mels: int = Field(24, ge=4)
    n_frames: int = Field(40, ge=4)
    span: int = Field(4, ge=1)
    pitch_offset: int = Field(2, ge=0)
    energy_factor: float = Field(1.5, gt=0)
    speaker_depth: float = Field(0.5, ge=0, lt=1)
    emotion_depth: float = Field(0.5, ge=0, lt=1)
    noise_sigma: float = Field(0.02, ge=0)
    table_seed: int = 2024


class EncoderSection(_Strict):
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 12
    prosody_layer: int = 2
    stride: int = 2
    train_baseline: bool = True  # also train the ASR-only variant for comparison


class ReconstructorSection(_Strict):
    lambda_mel: float = Field(ge=0)
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    dropout: float = Field(0.0, ge=0, lt=1)


class OptimSection(_Strict):
    lr: float = Field(3e-3, gt=0)
    steps: int = Field(3000, ge=1)
    batch_size: int = Field(32, ge=1)
    warmup_fraction: float = Field(0.02, ge=0, le=1)


class ProbeSection(_Strict):
    kinds: list[Literal["1layer", "2layer"]] = ["1layer", "2layer"]
    attributes: list[Literal["speaker_id", "emotion", "pitch_level", "energy_level", "f0", "energy"]] = [
        "speaker_id", "emotion", "pitch_level", "energy_level", "f0", "energy"
    ]
    n_bins: int = Field(10, ge=2)
    hidden: int = 256
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    n_seeds: int = 10
    n_folds: int = 5


class TeacherSection(_Strict):
    d_llm: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_train: int = Field(4000, ge=1)
    epochs: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)


class KDSection(_Strict):
    alpha: float = Field(ge=0, le=1)
    temperature: float = Field(gt=0)
    setting: Literal["GTQ_GTA", "ASRQ_ASRA", "ASRQ_GTA"] = "ASRQ_ASRA"
    corruption_rate: float = Field(0.1, ge=0, le=1)
    n_kd: int = Field(2000, ge=1)
    n_emotion_train: int = Field(2000, ge=1)
    teacher: TeacherSection = TeacherSection()
    grid_alphas: list[float] = []
    grid_settings: list[Literal["GTQ_GTA", "ASRQ_ASRA", "ASRQ_GTA"]] = []


class Stage1Section(_Strict):
    lr: float = Field(1e-3, gt=0)
    epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)


class Stage2Section(_Strict):
    lr: float = Field(1e-3, gt=0)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(32, ge=1)


class BackboneSection(_Strict):
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 32
    mode: Literal["global", "interleave"] = "global"
    r: int = Field(4, ge=1)
    stage1: Stage1Section = Stage1Section()
    stage2: Stage2Section = Stage2Section()
    train_no_kd: bool = True


class EvalSection(_Strict):
    n_qa: int = Field(500, ge=1)
    n_emotion: int = Field(400, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    out_dir: str = "artifacts"
    stages: list[str] = list(STAGES)
    data: DataSection = DataSection()
    render: RenderSection = RenderSection()
    encoder: EncoderSection = EncoderSection()
    reconstructor: ReconstructorSection
    optim: OptimSection = OptimSection()
    probe: ProbeSection = ProbeSection()
    kd: KDSection
    backbone: BackboneSection = BackboneSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _check(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}; known: {list(STAGES)}")
        if not 1 <= self.encoder.prosody_layer <= self.encoder.n_dec_layers:
            raise ValueError("encoder.prosody_layer must lie in [1, n_dec_layers]")
        if self.data.min_len > self.data.max_len:
            raise ValueError("data.min_len exceeds data.max_len")
        if self.data.max_len * self.render.span > self.render.n_frames:
            raise ValueError("data.max_len * render.span exceeds render.n_frames")
        if self.encoder.max_text_len < self.data.max_len:
            raise ValueError("encoder.max_text_len must cover data.max_len")
        if self.kd.n_emotion_train and self.data.n_emotion != 4:
            raise ValueError("the emotion task needs data.n_emotion == 4")
        return self


def _set_path(d: dict, path: list[str], value: Any) -> None:
    for key in path[:-1]:
        d = d.setdefault(key, {})
    d[path[-1]] = value


def env_overrides(environ: dict | None = None) -> list[tuple[list[str], Any]]:
    environ = os.environ if environ is None else environ
    out = []
    for key in sorted(environ):
        if key.startswith(ENV_PREFIX):
            out.append((key[len(ENV_PREFIX) :].split("__"), yaml.safe_load(environ[key])))
    return out


def format_errors(err: ValidationError) -> str:
    return "\n".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()
    )


def parse_config(raw: dict, environ: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a raw mapping after applying environment and explicit overrides.

    ``overrides`` maps dotted paths (``"kd.alpha"``) to values.  Raises
    :class:`ConfigError` listing every offending field path.
    """
    raw = yaml.safe_load(yaml.safe_dump(raw or {}))  # deep copy
    for path, value in env_overrides(environ):
        _set_path(raw, path, value)
    for dotted, value in (overrides or {}).items():
        _set_path(raw, dotted.split("."), value)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(format_errors(err)) from None


def load_config(path: str | Path, environ: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw or {}, environ, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="python"), sort_keys=True)
