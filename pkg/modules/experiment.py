import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import config
from modules.data import SynthSpec
from modules.discrepancy import DEFAULT_BANDWIDTHS, KernelFamily
from modules.distillation import DistillationConfig
from modules.errors import ConfigError

logger = logging.getLogger("kavi.experiment")

# declared order; reports sort rows by it
MODES = ('kavi', 'sda_then_kd', 'kd_then_sda', 'sda_only', 'mmsd_baseline', 'lmmd_baseline',
         'no_label_smoothing', 'source_only', 'cnn_teacher')
Mode = Literal['kavi', 'sda_then_kd', 'kd_then_sda', 'sda_only', 'mmsd_baseline', 'lmmd_baseline',
               'no_label_smoothing', 'source_only', 'cnn_teacher']
HARD_LABEL_MODES = ('no_label_smoothing',)

FULL_SCALE_EPOCHS = 400
FULL_SCALE_SAMPLES = 1000


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class DomainCondition(_Section):
    speed_factor: float = Field(1.0, gt=0)
    load_factor: float = Field(1.0, gt=0)
    noise_level: float = Field(0.05, ge=0)
    # manifest of a user-supplied archive; synthesized when absent
    archive: str | None = None


class DataSection(_Section):
    n_classes: int = Field(10, ge=2)
    samples_per_class: int = Field(100, ge=3)
    window: int = Field(config.SEGMENT_LENGTH, ge=8)
    overlap: float = Field(0.5, ge=0, lt=1)
    seed: int = Field(0, ge=0)
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    source: DomainCondition = DomainCondition()
    target: DomainCondition = DomainCondition(speed_factor=1.15, load_factor=0.8, noise_level=0.1)

    @field_validator('split')
    @classmethod
    def _split_sums_to_one(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split ratios must be nonnegative and sum to 1")
        return v


class ModelSection(_Section):
    nodes: int = Field(128, ge=1)
    graph_k: int = Field(2, ge=1)
    arma_stacks: int = Field(3, ge=1)


class LossesSection(_Section):
    epsilon: float = Field(0.1, ge=0, lt=1)
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    tau: float = Field(20.0, gt=0)
    lambda_cls: float = Field(0.8, ge=0, le=1)
    kd_tau_squared: bool = True
    kd_kl_reverse: bool = False

    @field_validator('bandwidths')
    @classmethod
    def _positive_bandwidths(cls, v):
        if not v or any(b <= 0 for b in v):
            raise ValueError("bandwidths must be a nonempty list of positive numbers")
        return v


class SchedulesSection(_Section):
    alpha1: float = Field(0.1, gt=0, lt=1)
    alpha2: float = Field(0.9, gt=0, lt=1)

    @model_validator(mode='after')
    def _ordered(self):
        if self.alpha1 > self.alpha2:
            raise ValueError("alpha1 must not exceed alpha2")
        return self


class RunSection(_Section):
    mode: Mode = 'kavi'
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(128, ge=2)
    learning_rate: float = Field(0.001, gt=0)
    seed: int = Field(0, ge=0)
    distance_repeats: int = Field(5, ge=1)
    # checkpoint selection on target validation labels; off keeps the target unlabeled
    select_on_target: bool = False


class ExperimentConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    losses: LossesSection = LossesSection()
    schedules: SchedulesSection = SchedulesSection()
    run: RunSection = RunSection()

    @property
    def mode(self) -> str:
        return self.run.mode

    @property
    def epsilon(self) -> float:
        '''Smoothing coefficient in effect; no_label_smoothing trains with 0.'''
        return 0.0 if self.run.mode in HARD_LABEL_MODES else self.losses.epsilon

    @property
    def kernel_family(self) -> KernelFamily:
        return KernelFamily(self.losses.bandwidths)

    @property
    def distillation(self) -> DistillationConfig:
        return DistillationConfig(tau=self.losses.tau, lambda_cls=self.losses.lambda_cls,
                                  alpha1=self.schedules.alpha1, alpha2=self.schedules.alpha2,
                                  tau_squared=self.losses.kd_tau_squared, kl_reverse=self.losses.kd_kl_reverse)

    def synth_specs(self) -> tuple[SynthSpec, SynthSpec]:
        d = self.data
        specs = tuple(SynthSpec(n_classes=d.n_classes, samples_per_class=d.samples_per_class,
                                speed_factor=c.speed_factor, load_factor=c.load_factor,
                                noise_level=c.noise_level, seed=d.seed, window=d.window, overlap=d.overlap)
                      for c in (d.source, d.target))
        return specs

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        '''Overrides keyed by dotted path, e.g. {"run.mode": "sda_only"}; None values are skipped.'''
        data = self.model_dump()
        for path, value in overrides.items():
            if value is None:
                continue
            section, _, key = path.partition('.')
            data[section][key] = value
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(_first_error(e)) from None

    def full_scale(self) -> "ExperimentConfig":
        return self.with_overrides(**{'run.epochs': FULL_SCALE_EPOCHS,
                                      'data.samples_per_class': FULL_SCALE_SAMPLES})


class RunManifest(BaseModel):
    config_path: str | None
    config: ExperimentConfig
    config_hash: str
    seeds: list[int]
    out_dir: str
    started_at: datetime
    finished_at: datetime | None = None


def _key_lines(node, prefix=()) -> dict[tuple, int]:
    '''Map every key path of a composed YAML mapping to its 1-based line.'''
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            lines[prefix + (i,)] = item.start_mark.line + 1
            lines.update(_key_lines(item, prefix + (i,)))
    return lines


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    return f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        raise ConfigError(f"malformed YAML: {getattr(e, 'problem', e)}",
                          line=mark.line + 1 if mark else None) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping of sections", line=1)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        lines = _key_lines(root)
        err = e.errors()[0]
        loc = tuple(err['loc'])
        # walk up to the nearest key that exists in the document
        line = None
        for depth in range(len(loc), 0, -1):
            if loc[:depth] in lines:
                line = lines[loc[:depth]]
                break
        key = '.'.join(str(p) for p in loc)
        raise ConfigError(f"{key}: {err['msg']}", line=line, key=key) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    '''Resolve a YAML experiment file; None gives the built-in defaults.'''
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    cfg = parse_config(text)
    logger.debug("loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode='json'), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()
