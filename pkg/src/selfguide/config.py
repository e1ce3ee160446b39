"""Run configuration: TOML parsing, defaults, validation, serialization.

Unknown keys are rejected and every validation error names the offending
key. Defaulting is idempotent: parse(serialize(parse(x))) == parse(x).
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import ModelConfig, default_layer_pair
from .codec import CodecConfig
from .errors import ConfigError
from .guidance import GuidanceConfig


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    kind: str = "shapes"  # "shapes" or "folder"
    root: str = ""
    image_size: int = 32
    num_classes: int = 8
    samples_per_class: int = 250
    seed: int = 0


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    total_steps: int = 1000
    batch_size: int = 64
    ema_decay: float = 0.9999
    deterministic: bool = True
    checkpoint_every: int = 1000
    codec_checkpoint: str = ""
    embedder_checkpoint: str = ""
    codec_steps: int = 1500
    embedder_steps: int = 1500


@dataclass(frozen=True)
class SampleSection:
    num_steps: int = 50
    cfg_scale: float = 4.0
    batch_size: int = 16
    class_label: int = -1  # -1 = unconditional (null class)
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    budget: int = 10000
    checkpoint: str = ""
    num_steps: int = 50
    cfg_scale: float = 1.0
    silhouette_t: float = 0.4
    silhouette_batch: int = 256


@dataclass(frozen=True)
class AblationSection:
    omega: tuple = ()
    lambda_guide: tuple = ()
    layer_pairs: tuple = ()  # sequence of [guiding, guided]
    guide_checkpoints: tuple = ()
    seeds: tuple = ()


@dataclass(frozen=True)
class VisualizeSection:
    layers: tuple = ()
    t_values: tuple = (0.5, 0.7)
    batch_size: int = 8
    checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    run: RunSection
    model: ModelConfig
    codec: CodecConfig
    guidance: GuidanceConfig
    optim: OptimConfig
    data: DataConfig
    sample: SampleSection
    eval: EvalSection
    ablation: AblationSection
    visualize: VisualizeSection


_SECTION_TYPES = {
    "run": RunSection,
    "model": ModelConfig,
    "codec": CodecConfig,
    "guidance": GuidanceConfig,
    "optim": OptimConfig,
    "data": DataConfig,
    "sample": SampleSection,
    "eval": EvalSection,
    "ablation": AblationSection,
    "visualize": VisualizeSection,
}

_MODEL_DEFAULTS = {
    "depth": 12,
    "hidden_dim": 256,
    "heads": 8,
    "patch_size": 2,
    "latent_channels": 4,
    "latent_size": 8,
    "num_classes": 8,
    "cond_dropout_prob": 0.1,
}


def _coerce(section: str, key: str, value: Any, target_type: type) -> Any:
    if target_type is bool:
        if isinstance(value, bool):
            return value
    elif target_type is int:
        if isinstance(value, bool):
            pass
        elif isinstance(value, int):
            return value
    elif target_type is float:
        if isinstance(value, bool):
            pass
        elif isinstance(value, (int, float)):
            return float(value)
    elif target_type is str:
        if isinstance(value, str):
            return value
    elif target_type is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    raise ConfigError(
        f"key '{section}.{key}' expects {target_type.__name__}, got {value!r}"
    )


def _build_section(name: str, raw: Mapping[str, Any]):
    cls = _SECTION_TYPES[name]
    valid = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{name}.{key}'")
        target = {f.name: f for f in fields(cls)}[key]
        py_type = _field_python_type(cls, key)
        kwargs[key] = _coerce(name, key, value, py_type)
    if name == "model":
        for key, default in _MODEL_DEFAULTS.items():
            kwargs.setdefault(key, default)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def _field_python_type(cls, key: str) -> type:
    for f in fields(cls):
        if f.name == key:
            default = f.default
            if isinstance(default, bool):
                return bool
            if isinstance(default, int):
                return int
            if isinstance(default, float):
                return float
            if isinstance(default, str):
                return str
            if isinstance(default, tuple):
                return tuple
            # required field with no default: infer from annotation string
            ann = str(f.type)
            for candidate, t in (("bool", bool), ("int", int), ("float", float), ("str", str)):
                if candidate in ann:
                    return t
            return type(default)
    raise KeyError(key)


def parse_config_dict(raw: Mapping[str, Any]) -> RunConfig:
    for section in raw:
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section '{section}'")
        if not isinstance(raw[section], Mapping):
            raise ConfigError(f"section '{section}' must be a table")
    sections = {name: _build_section(name, raw.get(name, {})) for name in _SECTION_TYPES}
    cfg = RunConfig(**sections)
    cfg = _apply_derived_defaults(cfg)
    _validate(cfg)
    return cfg


def _apply_derived_defaults(cfg: RunConfig) -> RunConfig:
    g = cfg.guidance
    if g.guided_layer == 0 or g.guiding_layer == 0:
        guided, guiding = default_layer_pair(cfg.model.depth)
        g = GuidanceConfig(
            omega=g.omega,
            lambda_guide=g.lambda_guide,
            guided_layer=g.guided_layer or guided,
            guiding_layer=g.guiding_layer or guiding,
            stop_step=g.stop_step,
            stop_epochs=g.stop_epochs,
            guide_checkpoint=g.guide_checkpoint,
            lambda_align=g.lambda_align,
        )
        cfg = RunConfig(**{**_sections_dict(cfg), "guidance": g})
    return cfg


def _sections_dict(cfg: RunConfig) -> dict:
    return {name: getattr(cfg, name) for name in _SECTION_TYPES}


def _validate(cfg: RunConfig) -> None:
    if cfg.run.total_steps < cfg.guidance.stop_step:
        raise ConfigError(
            f"key 'guidance.stop_step' ({cfg.guidance.stop_step}) exceeds "
            f"'run.total_steps' ({cfg.run.total_steps})"
        )
    if not 1 <= cfg.guidance.guided_layer <= cfg.model.depth:
        raise ConfigError(
            f"key 'guidance.guided_layer' ({cfg.guidance.guided_layer}) out of "
            f"range [1, {cfg.model.depth}]"
        )
    if not 1 <= cfg.guidance.guiding_layer <= cfg.model.depth:
        raise ConfigError(
            f"key 'guidance.guiding_layer' ({cfg.guidance.guiding_layer}) out of "
            f"range [1, {cfg.model.depth}]"
        )
    if cfg.data.kind not in ("shapes", "folder"):
        raise ConfigError(f"key 'data.kind' must be 'shapes' or 'folder', got {cfg.data.kind!r}")
    if cfg.data.kind == "folder" and not cfg.data.root:
        raise ConfigError("key 'data.root' is required when data.kind = 'folder'")
    if cfg.model.latent_channels != cfg.codec.latent_channels:
        raise ConfigError(
            f"key 'model.latent_channels' ({cfg.model.latent_channels}) must match "
            f"'codec.latent_channels' ({cfg.codec.latent_channels})"
        )
    if cfg.model.latent_size != cfg.codec.latent_size:
        raise ConfigError(
            f"key 'model.latent_size' ({cfg.model.latent_size}) must match the codec "
            f"latent size ({cfg.codec.latent_size})"
        )
    if cfg.data.image_size != cfg.codec.image_size:
        raise ConfigError(
            f"key 'data.image_size' ({cfg.data.image_size}) must match "
            f"'codec.image_size' ({cfg.codec.image_size})"
        )
    if cfg.model.num_classes != cfg.data.num_classes:
        raise ConfigError(
            f"key 'model.num_classes' ({cfg.model.num_classes}) must match "
            f"'data.num_classes' ({cfg.data.num_classes})"
        )
    for key in ("codec_checkpoint", "embedder_checkpoint"):
        path = getattr(cfg.run, key)
        if path and not Path(path).exists():
            raise ConfigError(f"key 'run.{key}' references missing path {path!r}")
    if cfg.guidance.guide_checkpoint and not Path(cfg.guidance.guide_checkpoint).exists():
        raise ConfigError(
            f"key 'guidance.guide_checkpoint' references missing path "
            f"{cfg.guidance.guide_checkpoint!r}"
        )


def parse_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    return parse_config_dict(raw)


def apply_overrides(raw: Mapping[str, Any], overrides: Sequence[str]) -> dict:
    """Apply `section.key=value` overrides; values parse as TOML literals."""
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        try:
            value = tomllib.loads(f"v = {text}")["v"]
        except tomllib.TOMLDecodeError:
            value = text  # bare strings allowed for convenience
        out.setdefault(section, {})
        out[section][key] = value
    return out


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize value {value!r} to TOML")


def serialize_config(cfg: RunConfig) -> str:
    """Emit the fully-defaulted config as TOML (tomli has no writer)."""
    lines: list[str] = []
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(cfg))
    return path


def config_snapshot(cfg: RunConfig) -> dict:
    """JSON-friendly nested dict of every section (for checkpoint manifests)."""
    snap = {}
    for name in _SECTION_TYPES:
        snap[name] = asdict(getattr(cfg, name))
        for k, v in snap[name].items():
            if isinstance(v, tuple):
                snap[name][k] = [list(i) if isinstance(i, tuple) else i for i in v]
    return snap


def default_config() -> RunConfig:
    return parse_config_dict({})
