"""Architecture configuration, size presets, INI persistence and token arithmetic."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

RESOLUTION_KEYS = (1, 2, 4, 8)

# (embed_dim, num_layers, num_heads) of the four reference model sizes
PRESETS = {
    "9.5M": (256, 6, 4),
    "126M": (1024, 8, 16),
    "1B": (3072, 8, 24),
    "10B": (8192, 11, 32),
}
PRESET_PARAMS = {"9.5M": 9.5e6, "126M": 126e6, "1B": 1e9, "10B": 10e9}


class ConfigError(ValueError):
    pass


def count_tokens(h: int, w: int, c: int, patch: int) -> int:
    """Sequence length of a [c, h, w] input cut into patch x patch tokens per channel."""
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide {h}x{w}")
    return h * w * c // (patch * patch)


@dataclass
class ReslimConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    patch_size: int = 2
    in_channels: int = 3
    out_channels: int = 3
    scale_factor: int = 4
    # None, or (min_side, max_side, density_threshold) on the token grid
    compression: tuple = None
    residual_channel_map: tuple = None
    norm_mean: tuple = None
    norm_std: tuple = None
    tv_weight: float = 1e-3
    huber_delta: float = 1e-3
    decoder_hidden: int = 16
    residual_hidden: int = 16
    dtype: str = "float32"
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.residual_channel_map is None:
            self.residual_channel_map = tuple(range(self.out_channels))
        if self.norm_mean is None:
            self.norm_mean = (0.0,) * self.in_channels
        if self.norm_std is None:
            self.norm_std = (1.0,) * self.in_channels
        self.residual_channel_map = tuple(int(i) for i in self.residual_channel_map)
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        if self.compression is not None:
            lo, hi, thr = self.compression
            self.compression = (int(lo), int(hi), float(thr))
        self.validate()

    def validate(self) -> None:
        if min(self.embed_dim, self.num_layers + 1, self.num_heads, self.patch_size, self.in_channels,
               self.out_channels, self.decoder_hidden, self.residual_hidden) < 1:
            raise ConfigError("sizes must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be a multiple of 4 for the 2-D position encoding")
        if self.scale_factor not in RESOLUTION_KEYS:
            raise ConfigError(f"scale_factor must be one of {RESOLUTION_KEYS}")
        if len(self.residual_channel_map) != self.out_channels:
            raise ConfigError("residual_channel_map needs one input index per output channel")
        if any(not 0 <= i < self.in_channels for i in self.residual_channel_map):
            raise ConfigError("residual_channel_map index out of range")
        if len(self.norm_mean) != self.in_channels or len(self.norm_std) != self.in_channels:
            raise ConfigError("norm_mean and norm_std need one entry per input channel")
        if any(s <= 0 for s in self.norm_std):
            raise ConfigError("norm_std entries must be positive")
        if self.tv_weight < 0 or self.huber_delta <= 0:
            raise ConfigError("tv_weight must be >= 0 and huber_delta > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.compression is not None:
            lo, hi, thr = self.compression
            ratio = hi // lo if lo >= 1 else 0
            if lo < 1 or hi % lo or ratio & (ratio - 1) or not 0 <= thr <= 1:
                raise ConfigError(f"invalid compression setting {self.compression}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def with_(self, **changes) -> "ReslimConfig":
        return replace(self, **changes)


def from_preset(name: str, **overrides) -> ReslimConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    dim, layers, heads = PRESETS[name]
    return ReslimConfig(embed_dim=dim, num_layers=layers, num_heads=heads, **overrides)


# ---------------------------------------------------------------- INI text

_TUPLE_FIELDS = ("residual_channel_map", "norm_mean", "norm_std")


def _format(name, value) -> str:
    if name == "compression":
        return "off" if value is None else ", ".join(str(v) for v in value)
    if name in _TUPLE_FIELDS:
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name, text: str, default):
    text = text.strip()
    try:
        if name == "compression":
            if text.lower() in ("off", "none", ""):
                return None
            lo, hi, thr = (p.strip() for p in text.split(","))
            return int(lo), int(hi), float(thr)
        if name in _TUPLE_FIELDS:
            conv = int if name == "residual_channel_map" else float
            return tuple(conv(p) for p in text.split(",") if p.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def model_fields() -> list:
    return [f.name for f in fields(ReslimConfig) if f.name != "extra"]


def section_to_config(section) -> ReslimConfig:
    """Build a config from a ``key = value`` mapping; unknown keys are errors."""
    known = set(model_fields())
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
    base = ReslimConfig()
    kwargs = {k: _parse(k, section[k], getattr(base, k)) for k in section}
    # tuple-valued defaults depend on the channel counts given alongside them
    return ReslimConfig(**kwargs)


def config_to_section(cfg: ReslimConfig) -> dict:
    return {name: _format(name, getattr(cfg, name)) for name in model_fields()}


def to_ini(cfg: ReslimConfig) -> str:
    parser = configparser.ConfigParser()
    parser["model"] = config_to_section(cfg)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> ReslimConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    extra = sorted(set(parser.sections()) - {"model"})
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(extra)}")
    if "model" not in parser:
        raise ConfigError("missing [model] section")
    return section_to_config(dict(parser["model"]))
