"""Configuration dataclasses and the flat ``key = value`` config file format.

A config file is INI-style with one section per subsystem::

    [model]
    num_layers = 4
    beta = 1.0
    consistency_temperature = 0.1

    [train]
    batch_size = 8

Values are merged in the order file < environment < command-line flags.
Environment overrides use ``VLTUNE__<SECTION>__<KEY>``.
"""

from __future__ import annotations

import configparser
import dataclasses
import difflib
import io
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "VLTUNE__"

ADAPTER_MODES = ("none", "self_only", "self_plus_cross")
BRANCH_CHOICES = ("original", "augmented", "both", "none")
TEXT_AUG_KINDS = ("llm_remote", "eda_local")
IMAGE_AUG_KINDS = ("diffusion_remote", "standard_local")
SPLIT_ROLES = ("base_to_novel", "cross_dataset", "domain_shift")

# fields every experiment must pin explicitly in its config file
MANDATORY_KEYS = (("model", "beta"), ("model", "consistency_temperature"), ("train", "batch_size"))


@dataclass
class AdapterConfig:
    depth: int = 2
    num_heads: int = 4
    bottleneck_dim: int | None = None  # None -> embed_dim // 2 per modality
    attach_image_branch: str = "original"
    attach_text_branch: str = "original"
    mode: str = "self_plus_cross"

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"adapter depth must be >= 0, got {self.depth}")
        if self.num_heads < 1:
            raise ConfigError(f"adapter num_heads must be positive, got {self.num_heads}")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ConfigError(f"adapter bottleneck_dim must be positive, got {self.bottleneck_dim}")
        if self.mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter mode must be one of {ADAPTER_MODES}, got {self.mode!r}")
        for name in ("attach_image_branch", "attach_text_branch"):
            if getattr(self, name) not in BRANCH_CHOICES:
                raise ConfigError(f"{name} must be one of {BRANCH_CHOICES}, got {getattr(self, name)!r}")
        if self.mode == "self_plus_cross" and self.depth > 0 and "none" in (
            self.attach_image_branch,
            self.attach_text_branch,
        ):
            raise ConfigError("adapter mode self_plus_cross requires both attach_image_branch and attach_text_branch")
        if self.mode == "self_plus_cross" and "both" in (self.attach_image_branch, self.attach_text_branch):
            if self.attach_image_branch != self.attach_text_branch:
                raise ConfigError("with cross-attention, 'both' must be set on the image and text attach points together")

    @property
    def uses_cross(self) -> bool:
        return self.depth > 0 and self.mode == "self_plus_cross"


@dataclass
class ModelConfig:
    num_layers: int = 4
    patch_size: int = 8
    image_size: int = 32
    channels: int = 3
    embed_dim_image: int = 64
    embed_dim_text: int = 64
    shared_dim: int = 64
    prompt_depth: int | None = None  # None -> num_layers
    prompt_length: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 512
    max_text_len: int = 32
    temperature: float = 0.07
    consistency_temperature: float = 0.1
    alpha: float = 2.0
    beta: float = 1.0
    use_consistency: bool = True
    prompt_init_std: float = 0.02
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def __post_init__(self):
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if self.prompt_depth is None:
            self.prompt_depth = self.num_layers
        for name in (
            "num_layers", "patch_size", "image_size", "channels", "embed_dim_image",
            "embed_dim_text", "shared_dim", "num_heads", "mlp_ratio", "vocab_size", "max_text_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if not 0 <= self.prompt_depth <= self.num_layers:
            raise ConfigError(f"prompt_depth must lie in [0, num_layers={self.num_layers}], got {self.prompt_depth}")
        if self.prompt_length < 0:
            raise ConfigError(f"prompt_length must be >= 0, got {self.prompt_length}")
        for name in ("embed_dim_image", "embed_dim_text"):
            if getattr(self, name) % self.num_heads:
                raise ConfigError(f"{name} must be divisible by num_heads ({self.num_heads})")
            if getattr(self, name) % self.adapter.num_heads:
                raise ConfigError(f"{name} must be divisible by adapter num_heads ({self.adapter.num_heads})")
        if self.temperature <= 0 or self.consistency_temperature <= 0:
            raise ConfigError("temperature and consistency_temperature must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def adapter_depth(self) -> int:
        return self.adapter.depth

    @property
    def prompts_active(self) -> bool:
        return self.prompt_depth > 0 and self.prompt_length > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        adapter = AdapterConfig(**data.pop("adapter", {}))
        return cls(adapter=adapter, **data)


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.004
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    seed: int = 0
    freeze_backbone: bool = True
    single_alpha: bool = False
    max_steps: int | None = None
    grad_clip_norm: float | None = None  # None -> no clipping
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer != "sgd":
            raise ConfigError(f"only the sgd optimizer is supported, got {self.optimizer!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (in-batch negatives), got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be positive when set, got {self.grad_clip_norm}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class DataConfig:
    manifest: str = ""
    shots: int = 16
    split_role: str = "base_to_novel"
    randomized_split: bool = False
    targets: str = ""  # comma-separated target manifests for transfer roles
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.split_role not in SPLIT_ROLES:
            raise ConfigError(f"split_role must be one of {SPLIT_ROLES}, got {self.split_role!r}")

    @property
    def target_list(self) -> list[str]:
        return [t.strip() for t in self.targets.split(",") if t.strip()]


@dataclass
class AugmentConfig:
    text_kind: str = "eda_local"
    image_kind: str = "standard_local"
    text_endpoint: str = ""
    image_endpoint: str = ""
    cache_dir: str = ""
    seed: int = 0
    pool_size: int = 1
    timeout: float = 30.0

    def __post_init__(self):
        if self.text_kind not in TEXT_AUG_KINDS:
            raise ConfigError(f"text_kind must be one of {TEXT_AUG_KINDS}, got {self.text_kind!r}")
        if self.image_kind not in IMAGE_AUG_KINDS:
            raise ConfigError(f"image_kind must be one of {IMAGE_AUG_KINDS}, got {self.image_kind!r}")
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")


@dataclass
class EvalConfig:
    pairwise: bool = True
    novel_space: str = "novel"
    baseline: str = ""

    def __post_init__(self):
        if self.novel_space not in ("novel", "joint"):
            raise ConfigError(f"novel_space must be 'novel' or 'joint', got {self.novel_space!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "model": ModelConfig,
    "adapter": AdapterConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "augment": AugmentConfig,
    "eval": EvalConfig,
}


def _section_fields(section: str) -> dict[str, object]:
    cls = _SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name != "adapter"}


def _nearest(word: str, candidates) -> str:
    match = difflib.get_close_matches(word, list(candidates), n=1, cutoff=0.0)
    return match[0] if match else ""


def _coerce(section: str, key: str, raw: str, hint):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {hint.__name__}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check_key(section: str, key: str):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]; did you mean [{_nearest(section, _SECTIONS)}]?")
    fields = _section_fields(section)
    if key not in fields:
        raise ConfigError(f"unknown key {section}.{key}; did you mean {section}.{_nearest(key, fields)}?")


def parse_overrides(items) -> dict[tuple[str, str], str]:
    """Parse ``section.key=value`` strings."""
    out = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _check_key(section, key)
        out[(section, key)] = value
    return out


def env_overrides(environ=None) -> dict[tuple[str, str], str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
        _check_key(*parts)
        out[tuple(parts)] = value
    return out


def read_config_text(text: str) -> dict[tuple[str, str], str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    raw = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            _check_key(section, key)
            raw[(section, key)] = value
    return raw


def build_run_config(raw: dict[tuple[str, str], str], require_mandatory: bool = True) -> RunConfig:
    if require_mandatory:
        for section, key in MANDATORY_KEYS:
            if (section, key) not in raw:
                raise ConfigError(f"missing mandatory field {section}.{key}")
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    for (section, key), text in raw.items():
        _check_key(section, key)
        values[section][key] = _coerce(section, key, text, _section_fields(section)[key])
    adapter = AdapterConfig(**values["adapter"])
    return RunConfig(
        model=ModelConfig(adapter=adapter, **values["model"]),
        train=TrainConfig(**values["train"]),
        data=DataConfig(**values["data"]),
        augment=AugmentConfig(**values["augment"]),
        eval=EvalConfig(**values["eval"]),
    )


def load_run_config(path=None, overrides=(), environ=None, require_mandatory=True) -> RunConfig:
    """Merge file, environment and ``section.key=value`` overrides into a validated RunConfig."""
    raw: dict[tuple[str, str], str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(read_config_text(path.read_text()))
    raw.update(env_overrides(environ))
    if isinstance(overrides, dict):
        raw.update(overrides)
    else:
        raw.update(parse_overrides(overrides))
    return build_run_config(raw, require_mandatory=require_mandatory)


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig; the output is itself a loadable config file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    objects = {
        "model": cfg.model,
        "adapter": cfg.model.adapter,
        "train": cfg.train,
        "data": cfg.data,
        "augment": cfg.augment,
        "eval": cfg.eval,
    }
    for section, obj in objects.items():
        parser[section] = {name: _format_value(getattr(obj, name)) for name in _section_fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def paper_preset() -> RunConfig:
    """Full-scale settings: 12 layers, ViT-B/16 geometry, deep prompts at every layer."""
    model = ModelConfig(
        num_layers=12,
        patch_size=16,
        image_size=224,
        embed_dim_image=768,
        embed_dim_text=512,
        shared_dim=512,
        prompt_depth=12,
        prompt_length=2,
        num_heads=8,
        vocab_size=49408,
        max_text_len=77,
        alpha=2.0,
        adapter=AdapterConfig(depth=2, num_heads=8),
    )
    return RunConfig(
        model=model,
        train=TrainConfig(epochs=10, learning_rate=0.004),
        data=DataConfig(shots=16),
    )


# (intra-modal consistency, adapter, cross-attention) rows of the component ablation
COMPONENT_ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (False, True, False),
    (False, True, True),
    (True, True, True),
)


def ablation_variant(cfg: RunConfig, consistency: bool, adapter: bool, cross: bool) -> RunConfig:
    """Copy of ``cfg`` with the consistency loss, adapters and adapter cross-attention toggled."""
    if cross and not adapter:
        raise ConfigError("cross-attention lives inside the adapter; enable the adapter too")
    depth = (cfg.model.adapter.depth or 1) if adapter else 0
    mode = "self_plus_cross" if cross else "self_only"
    new_adapter = dataclasses.replace(cfg.model.adapter, depth=depth, mode=mode)
    model = dataclasses.replace(cfg.model, use_consistency=consistency, adapter=new_adapter)
    return dataclasses.replace(cfg, model=model)


def attention_mode_variant(cfg: RunConfig, mode: str) -> RunConfig:
    """Copy of ``cfg`` with the adapter attention mode set (``none``, ``self_only``, ``self_plus_cross``)."""
    new_adapter = dataclasses.replace(cfg.model.adapter, mode=mode, depth=cfg.model.adapter.depth or 1)
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, adapter=new_adapter))
