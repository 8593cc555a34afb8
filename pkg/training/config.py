"""
Run configuration - one YAML file with a section per module, typed by dataclasses
Command-line overrides use dotted keys: train.seed=3
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml
from dotenv import load_dotenv

from recovery.errors import ConfigurationError, RangeError

load_dotenv()

DEFECT_FAMILIES = ('scratch', 'blob', 'hole')
TEXTURES = ('striped', 'cellular', 'checker')
MIXED_STRATEGIES = ('abnormal_and_normal', 'abnormal_normal', 'normal_abnormal')
MRM_VARIANTS = ('a', 'b', 'c')
REFINEMENTS = ('progressive', 'single', 'coarse_only')
UNET_STAGES = ('up-1', 'up-2', 'up-3', 'up-4')


@dataclass
class DataConfig:
    image_size: int = 64
    texture: str = 'striped'
    palette: Tuple[Tuple[float, float, float], ...] = ((0.60, 0.62, 0.66), (0.30, 0.32, 0.36), (0.80, 0.80, 0.82))
    texture_frequency: float = 6.0
    texture_angle: float = 0.4
    local_jitter: float = 0.04
    defect_families: Tuple[str, ...] = ('scratch', 'blob')
    normal_count: int = 16
    abnormal_per_type: int = 4
    workers: int = 1
    seed: int = 0

    def validate(self):
        if self.normal_count < 1:
            raise ConfigurationError("data.normal_count must be >= 1")
        if self.abnormal_per_type < 1:
            raise ConfigurationError("data.abnormal_per_type must be >= 1")
        if not self.defect_families:
            raise ConfigurationError("data.defect_families must name at least one family")
        unknown = [f for f in self.defect_families if f not in DEFECT_FAMILIES]
        if unknown:
            raise ConfigurationError(f"unknown defect families {unknown}; choose from {DEFECT_FAMILIES}")
        if self.texture not in TEXTURES:
            raise ConfigurationError(f"data.texture must be one of {TEXTURES}")


@dataclass
class ScheduleConfig:
    num_train_steps: int = 1000
    cosine_offset: float = 0.008
    # predicted clean latents are clamped to [-clip_sample, clip_sample]; null disables
    clip_sample: Optional[float] = 4.0

    def validate(self):
        if self.num_train_steps < 2:
            raise ConfigurationError("schedule.num_train_steps must be >= 2")
        if self.clip_sample is not None and self.clip_sample <= 0:
            raise RangeError("schedule.clip_sample must be positive or null")


@dataclass
class VAEConfig:
    image_size: int = 64
    latent_channels: int = 4
    # channel widths at image, image/2 and image/4 resolution
    widths: Tuple[int, int, int] = (32, 32, 64)
    kl_weight: float = 1e-6
    lr: float = 1e-3
    steps: int = 3000
    batch_size: int = 16
    # fresh normal renders for the held-out reconstruction check; 0 disables it
    heldout_count: int = 8
    seed: int = 0

    def validate(self):
        if len(self.widths) != 3:
            raise ConfigurationError("vae.widths must list exactly 3 widths")
        if self.heldout_count < 0:
            raise ConfigurationError("vae.heldout_count must be >= 0")
        if self.image_size % 4:
            raise ConfigurationError("vae.image_size must be divisible by 4")


@dataclass
class UNetConfig:
    latent_size: int = 16
    latent_channels: int = 4
    widths: Tuple[int, ...] = (64, 128, 128, 128)
    heads: int = 2
    context_dim: int = 64
    time_embed_dim: int = 128
    seed: int = 0

    def validate(self):
        if self.latent_size % (2 ** (len(self.widths) - 1)):
            raise ConfigurationError("unet.latent_size must be divisible by 2**(levels-1)")
        for width in self.widths:
            if width % self.heads:
                raise ConfigurationError("unet widths must be divisible by unet.heads")
        if self.context_dim % self.heads:
            raise ConfigurationError("unet.context_dim must be divisible by unet.heads")


@dataclass
class PromptConfig:
    n_anomaly_tokens: int = 4
    n_normal_tokens: int = 1
    padded_length: int = 16
    embedding_dim: int = 64
    init_jitter: float = 0.1
    with_tp: bool = False
    seed: int = 0

    def validate(self):
        if self.n_anomaly_tokens < 1 or self.n_normal_tokens < 1:
            raise ConfigurationError("prompt token counts must be >= 1")


@dataclass
class TrainConfig:
    steps_per_anomaly_type: int = 800
    max_steps: Optional[int] = None
    abnormal_count: int = 2
    normal_count: int = 2
    # full-scale rates are 4e-6 (U-Net) and 4e-5 (embeddings); the toy keeps the 10x ratio
    lr_unet: float = 1e-4
    lr_embeddings: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    seed: int = 0
    alignment_layers: Tuple[int, ...] = (2, 3)
    mixed_strategy: str = 'abnormal_and_normal'
    no_mixed: bool = False
    no_na: bool = False
    no_st: bool = False
    at_variant: bool = False
    da_weight: float = 1.0
    df_weight: float = 1.0
    ob_weight: float = 1.0
    at_weight: float = 1.0
    alignment_timestep: int = 500
    checkpoint_every: Optional[int] = None

    def validate(self):
        if self.mixed_strategy not in MIXED_STRATEGIES:
            raise ConfigurationError(f"train.mixed_strategy must be one of {MIXED_STRATEGIES}")
        if self.at_variant and not self.no_st:
            raise ConfigurationError("train.at_variant replaces the second DA term; set train.no_st as well")
        if self.abnormal_count < 0 or self.normal_count < 0 or self.abnormal_count + self.normal_count == 0:
            raise ConfigurationError("train batch composition must be non-empty")
        if not self.alignment_layers:
            raise ConfigurationError("train.alignment_layers must name at least one layer")

    def total_steps(self, num_types: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.steps_per_anomaly_type * num_types


@dataclass
class RMPConfig:
    steps_per_anomaly_type: int = 800
    max_steps: Optional[int] = None
    abnormal_count: int = 2
    normal_count: int = 2
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    feature_timesteps: Tuple[int, ...] = (83, 42, 0)
    unet_features: Tuple[str, ...] = ('up-2', 'up-3')
    coarse_channels: Tuple[int, ...] = (32, 16)
    transformer_layers: int = 4
    transformer_heads: int = 4
    vae_feature_source: str = 'decoder'
    mrm_variant: str = 'c'
    refinement: str = 'progressive'
    coarse_supervision: bool = True
    normal_supervision: bool = True
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = 0.75

    def validate(self):
        if self.mrm_variant not in MRM_VARIANTS:
            raise ConfigurationError(f"rmp.mrm_variant must be one of {MRM_VARIANTS}")
        if self.refinement not in REFINEMENTS:
            raise ConfigurationError(f"rmp.refinement must be one of {REFINEMENTS}")
        if self.vae_feature_source not in ('decoder', 'encoder'):
            raise ConfigurationError("rmp.vae_feature_source must be 'decoder' or 'encoder'")
        unknown = [s for s in self.unet_features if s not in UNET_STAGES]
        if unknown or len(self.unet_features) < 2:
            raise ConfigurationError(f"rmp.unet_features must name >= 2 of {UNET_STAGES}")
        if len(self.coarse_channels) != len(self.unet_features):
            raise ConfigurationError("rmp.coarse_channels needs one width per selected U-Net feature")
        if not self.feature_timesteps:
            raise ConfigurationError("rmp.feature_timesteps must not be empty")

    def total_steps(self, num_types: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.steps_per_anomaly_type * num_types


@dataclass
class InferenceConfig:
    count: int = 100
    noise_strength: float = 1.0
    sampler_steps: int = 25
    mask_threshold: float = 0.2
    mask_average_steps: int = 3
    batch_size: int = 16
    seed: int = 0

    def validate(self):
        if not 0.0 < self.noise_strength <= 1.0:
            raise RangeError("inference.noise_strength must lie in (0, 1]")
        if not 0.0 < self.mask_threshold < 1.0:
            raise RangeError("inference.mask_threshold must lie in (0, 1)")
        if self.sampler_steps < self.mask_average_steps or self.mask_average_steps < 1:
            raise RangeError("inference.sampler_steps must be >= mask_average_steps >= 1")


@dataclass
class MetricsConfig:
    kid_degree: int = 3
    feature_seed: int = 0
    num_classes: int = 10

    def validate(self):
        if self.kid_degree < 1:
            raise ConfigurationError("metrics.kid_degree must be >= 1")


@dataclass
class PathsConfig:
    cache_dir: Optional[str] = None
    data_dir: str = 'data/corpus'
    out_dir: str = 'runs'

    def validate(self):
        pass

    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir or os.getenv('SEAS_CACHE_DIR', '.seas_cache'))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rmp: RMPConfig = field(default_factory=RMPConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> 'RunConfig':
        for f in fields(self):
            getattr(self, f.name).validate()
        if self.vae.latent_channels != self.unet.latent_channels:
            raise ConfigurationError("vae.latent_channels and unet.latent_channels differ")
        if self.vae.image_size // 4 != self.unet.latent_size:
            raise ConfigurationError("unet.latent_size must equal vae.image_size / 4")
        if self.prompt.embedding_dim != self.unet.context_dim:
            raise ConfigurationError("prompt.embedding_dim must equal unet.context_dim")
        if self.data.image_size != self.vae.image_size:
            raise ConfigurationError("data.image_size must equal vae.image_size")
        if max(self.train.alignment_layers) > len(self.unet.widths) or min(self.train.alignment_layers) < 1:
            raise ConfigurationError("train.alignment_layers reference a missing attention layer")
        return self

    def single_type(self, anomaly_type: int) -> 'RunConfig':
        """Configuration of a generator that models one anomaly type only (no-mixed arm)"""
        families = self.data.defect_families
        if not 1 <= anomaly_type <= len(families):
            raise RangeError(f"anomaly type {anomaly_type} outside [1, {len(families)}]")
        return replace(self, data=replace(self.data, defect_families=(families[anomaly_type - 1],)),
                       train=replace(self.train, no_mixed=False))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of the effective configuration, paths excluded"""
        data = self.to_dict()
        data.pop('paths')
        canonical = json.dumps(data, sort_keys=True, default=list)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _coerce(default: Any, value: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build_section(cls, data: Dict[str, Any], section: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in section '{section}': {unknown}")
    defaults = cls()
    kwargs = {name: _coerce(getattr(defaults, name), value) for name, value in data.items()}
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    data = data or {}
    sections = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigurationError(f"unknown config sections: {unknown}")
    built = {}
    for f in fields(RunConfig):
        section_cls = type(f.default_factory())
        built[f.name] = _build_section(section_cls, data.get(f.name), f.name)
    return RunConfig(**built)


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply dotted overrides like 'train.seed=3' to a raw config mapping"""
    data = json.loads(json.dumps(data or {}))
    for override in overrides:
        if '=' not in override or '.' not in override.split('=', 1)[0]:
            raise ConfigurationError(f"override must look like section.key=value: {override!r}")
        key, raw_value = override.split('=', 1)
        section, name = key.split('.', 1)
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section][name] = yaml.safe_load(raw_value)
    return data


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load a YAML run config, apply overrides and validate"""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}")
    raw = apply_overrides(raw, overrides)
    return config_from_dict(raw).validate()
