"""
Run Configuration
=================

Model, training and run settings as dataclasses, the built-in `reference` and
`small` profiles, strict JSON loading and the environment variables the
command line honours.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, get_args

from errors import ConfigError, ParameterError
from nn_blocks import BlockConfig

logger = logging.getLogger(__name__)

MAP_MODES = ("transformer", "cnn", "none")
DECODINGS = ("autoregressive", "non_autoregressive")
PROFILES = ("reference", "small")


@dataclass
class ModelConfig:
    """Architecture and schedule; defaults are the reference profile."""
    d_m: int = 256
    heads: int = 8
    ffn_mult: int = 4
    attn_scale: bool = True
    literal_eqs: bool = True
    encoder_blocks: int = 2          # trajectory encoder depth
    map_blocks: int = 2              # ViT depth inside the map encoder
    prior_layers: int = 2            # prior decoder depth
    decoder_layers: int = 4          # trajectory decoder depth
    modes: int = 12                  # intention modes per agent
    head_layers: int = 2             # MLP layers in the Gaussian head
    tau: int = 4
    horizon: int = 6                 # T
    max_agents: int = 8
    map_size: int = 64
    map_extent: float = 50.0
    patch_size: int = 8              # local patch side
    patch_stride: int = 4
    raw_pixel_indices: bool = False
    map_mode: str = "transformer"
    interaction: bool = True
    decoding: str = "autoregressive"

    def validate(self) -> "ModelConfig":
        try:
            self.block_config()
        except ParameterError as e:
            raise ConfigError(str(e)) from None
        for name in ("encoder_blocks", "map_blocks", "prior_layers", "decoder_layers",
                     "modes", "head_layers", "horizon", "max_agents", "patch_size", "patch_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.tau < 0:
            raise ConfigError(f"model.tau must be >= 0, got {self.tau}")
        if self.map_size < 2 or self.map_size % 2:
            raise ConfigError(f"model.map_size must be an even number of pixels, got {self.map_size}")
        if self.patch_size > self.map_size // 2:
            raise ConfigError(f"patch_size {self.patch_size} exceeds the {self.map_size // 2}px feature map")
        if self.patch_stride > self.patch_size:
            raise ConfigError("patch_stride larger than patch_size leaves feature cells uncovered")
        if self.map_extent <= 0:
            raise ConfigError(f"model.map_extent must be positive, got {self.map_extent}")
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"model.map_mode must be one of {MAP_MODES}, got {self.map_mode!r}")
        if self.decoding not in DECODINGS:
            raise ConfigError(f"model.decoding must be one of {DECODINGS}, got {self.decoding!r}")
        return self

    def block_config(self) -> BlockConfig:
        return BlockConfig(d_m=self.d_m, heads=self.heads, ffn_mult=self.ffn_mult,
                           attn_scale=self.attn_scale, literal_eqs=self.literal_eqs)

    @property
    def resolution(self) -> float:
        return self.map_extent / self.map_size

    @property
    def patches_per_axis(self) -> int:
        return (self.map_size // 2 - self.patch_size) // self.patch_stride + 1

    @property
    def patch_count(self) -> int:
        return self.patches_per_axis ** 2


@dataclass
class TrainConfig:
    """Optimiser and schedule settings."""
    lr: float = 5e-4
    momentum: float = 0.95
    lr_min_ratio: float = 0.1
    lr_period: int = 10
    batch_tf: int = 64
    batch_ar: int = 16
    epochs: int = 100
    tf_to_ar_switch: Optional[int] = None
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.lr_min_ratio <= 1:
            raise ConfigError(f"train.lr_min_ratio must be in (0, 1], got {self.lr_min_ratio}")
        for name in ("lr_period", "batch_tf", "batch_ar", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.tf_to_ar_switch is not None and self.tf_to_ar_switch < 0:
            raise ConfigError(f"train.tf_to_ar_switch must be >= 0, got {self.tf_to_ar_switch}")
        if self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be > 0, got {self.grad_clip}")
        return self

    @property
    def switch_epoch(self) -> int:
        """First epoch trained in autoregressive mode."""
        if self.tf_to_ar_switch is not None:
            return self.tf_to_ar_switch
        return int(0.75 * self.epochs)


PROFILE_OVERRIDES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "reference": {"model": {}, "train": {}},
    "small": {
        "model": {"d_m": 64, "heads": 4, "encoder_blocks": 1, "map_blocks": 1,
                  "prior_layers": 1, "decoder_layers": 2, "modes": 4},
        "train": {"epochs": 60},
    },
}


@dataclass
class RunConfig:
    profile: str = "small"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"profile": self.profile, "model": asdict(self.model), "train": asdict(self.train)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _checked(name: str, value: Any, annotation, section: str) -> Any:
    """`value` if it fits the field type; ints are widened for float fields."""
    allowed = get_args(annotation) or (annotation,)
    if value is None and type(None) in allowed:
        return value
    kind = next(t for t in allowed if t is not type(None))
    is_bool = isinstance(value, bool)
    if kind is float and isinstance(value, int) and not is_bool:
        return float(value)
    if isinstance(value, kind) and (kind is bool or not is_bool):
        return value
    raise ConfigError(f"{section}.{name} must be {kind.__name__}, got {type(value).__name__} {value!r}")


def _apply(cls, base, overrides: Dict[str, Any], section: str):
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    values = asdict(base)
    values.update({name: _checked(name, value, known[name], section) for name, value in overrides.items()})
    return cls(**values)


def profile_config(profile: str = "small") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
    overrides = PROFILE_OVERRIDES[profile]
    model = _apply(ModelConfig, ModelConfig(), overrides["model"], "model")
    train = _apply(TrainConfig, TrainConfig(), overrides["train"], "train")
    return RunConfig(profile=profile, model=model, train=train).validate()


def run_config_from_dict(document: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a JSON document; the profile supplies missing values."""
    if not isinstance(document, dict):
        raise ConfigError("configuration document must be a JSON object")
    unknown = sorted(set(document) - {"profile", "model", "train"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    base = profile_config(document.get("profile", "small"))
    model = _apply(ModelConfig, base.model, document.get("model", {}) or {}, "model")
    train = _apply(TrainConfig, base.train, document.get("train", {}) or {}, "train")
    return RunConfig(profile=base.profile, model=model, train=train).validate()


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    config = run_config_from_dict(document)
    logger.info(f"Loaded {config.profile} run configuration from {path}")
    return config


def model_config_from_dict(values: Dict[str, Any]) -> ModelConfig:
    return _apply(ModelConfig, ModelConfig(), values, "model").validate()


def worker_count() -> int:
    """Thread cap from LATENTFORMER_THREADS, defaulting to the machine's cores."""
    raw = os.getenv("LATENTFORMER_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"LATENTFORMER_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"LATENTFORMER_THREADS must be >= 1, got {value}")
    return value
