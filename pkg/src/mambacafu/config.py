"""Model configuration, the stage-shape contract and config-file I/O.

The config is one flat, immutable record. Ablations are boolean flags on it so
that a sweep is just a list of configs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

VARIANTS = ("V0", "V1")

# Transformer-branch stage widths (PVTv2-B0 and PVTv2-B2-linear families).
TRANSFORMER_CHANNELS = {"V0": (32, 64, 160, 256), "V1": (64, 128, 320, 512)}
# ResNet-18 taps: post-stem, layer1, layer2, layer3.
CNN_CHANNELS = (64, 64, 128, 256)
TINY_DIVISOR = 8

# Downsampling factor of each named tensor relative to the input image.
_ENCODER_LAYOUT = [
    # name, stage index, stride, channel source
    ("x_0", 0, 1, ("stem", 0)),
    ("t_0", 0, 4, ("t", 0)),
    ("t_1", 1, 8, ("t", 1)),
    ("t_2", 2, 16, ("t", 2)),
    ("t_3", 3, 32, ("t", 3)),
    ("r_0", 0, 2, ("r", 0)),
    ("r_1", 1, 4, ("r", 1)),
    ("r_2", 2, 8, ("r", 2)),
    ("r_3", 3, 16, ("r", 3)),
    ("x_0_pooled", 0, 2, ("stem", 0)),
    ("x_1", 1, 2, ("x", 0)),
    ("x_2", 2, 4, ("x", 1)),
    ("x_3", 3, 8, ("x", 2)),
    ("x_4", 4, 16, ("x", 3)),
    ("coamamba", 5, 8, ("x", 3)),
    ("x_5", 5, 16, ("x", 3)),
]
_DECODER_LAYOUT = [
    ("d_4", 4, 8, ("x", 3)),
    ("dlcoa_1", 4, 8, ("x", 2)),
    ("d_3", 3, 4, ("x", 2)),
    ("dlcoa_2", 3, 4, ("x", 1)),
    ("d_2", 2, 2, ("x", 1)),
    ("dlcoa_3", 2, 2, ("x", 0)),
    ("d_1", 1, 1, ("x", 0)),
    ("d_0", 1, 1, ("stem", 0)),
]


class ConfigError(ValueError):
    """Raised when a config is used while it has violations."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class AblationFlags:
    use_resnet_branch: bool = True
    use_coag: bool = True
    use_mambaconv: bool = True
    use_coasmamba: bool = True
    use_coamamba: bool = True
    use_doublelcoa: bool = True


# Rows of the two ablation tables, keyed by display name.
TABLE6 = {
    "Baseline": AblationFlags(use_resnet_branch=False, use_coag=False, use_mambaconv=False),
    "w/o MambaConv": AblationFlags(use_mambaconv=False),
    "w/o ResBranch": AblationFlags(use_resnet_branch=False),
    "w/o CoAG": AblationFlags(use_coag=False),
    "full": AblationFlags(),
}
TABLE7 = {
    "Baseline": AblationFlags(use_coasmamba=False, use_coamamba=False, use_doublelcoa=False),
    "+CoASMamba": AblationFlags(use_coamamba=False, use_doublelcoa=False),
    "+CoASMamba+CoAMamba": AblationFlags(use_doublelcoa=False),
    "full": AblationFlags(),
}


@dataclass(frozen=True)
class StageSpec:
    stage_index: int
    resolution: int
    channels: int


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "V1"
    input_size: int = 224
    in_channels: int = 3
    num_classes: int = 9
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stem_channels: int = 32
    bottleneck_pool: int = 14
    ssm_state_dim: int = 16
    ca_reduction: int = 16
    tiny: bool = False
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0

    @classmethod
    def tiny_config(cls, num_classes: int = 2, input_size: int = 64, **overrides: Any) -> "ModelConfig":
        """Channel widths divided by 8, one block per backbone stage."""
        base = dict(
            input_size=input_size,
            num_classes=num_classes,
            stage_channels=(8, 16, 32, 64),
            stem_channels=4,
            bottleneck_pool=input_size // 16,
            ssm_state_dim=8,
            ca_reduction=4,
            tiny=True,
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def transformer_channels(self) -> tuple[int, ...]:
        chans = TRANSFORMER_CHANNELS[self.variant]
        if self.tiny:
            return tuple(c // TINY_DIVISOR for c in chans)
        return chans

    @property
    def cnn_channels(self) -> tuple[int, ...]:
        if self.tiny:
            return tuple(c // TINY_DIVISOR for c in CNN_CHANNELS)
        return CNN_CHANNELS

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        flags = d.pop("ablation")
        d["stage_channels"] = list(self.stage_channels)
        d.update(flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        d = dict(d)
        flag_names = {f.name for f in dataclasses.fields(AblationFlags)}
        flags = {k: bool(d.pop(k)) for k in list(d) if k in flag_names}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
        if "stage_channels" in d:
            d["stage_channels"] = tuple(int(c) for c in d["stage_channels"])
        if isinstance(d.get("ablation"), Mapping):
            flags = {**d.pop("ablation"), **flags}
        return cls(**d, ablation=AblationFlags(**flags))


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return a list of violations; an empty list means the config is valid."""
    problems = []
    if cfg.variant not in VARIANTS:
        problems.append(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.input_size < 32 or cfg.input_size % 32:
        problems.append("input_size not divisible by 32")
    if len(cfg.stage_channels) != 4:
        problems.append("stage_channels must have four entries")
    elif any(b <= a for a, b in zip(cfg.stage_channels, cfg.stage_channels[1:])):
        problems.append("stage_channels not strictly increasing")
    if cfg.stage_channels and cfg.stem_channels >= cfg.stage_channels[0]:
        problems.append("stem_channels must be smaller than stage_channels[0]")
    if cfg.input_size % 32 == 0 and cfg.bottleneck_pool * 16 != cfg.input_size:
        problems.append("bottleneck_pool must equal input_size / 16")
    for name in ("in_channels", "num_classes", "ssm_state_dim", "ca_reduction", "stem_channels"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    return problems


def check_config(cfg: ModelConfig) -> ModelConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _source_channels(cfg: ModelConfig, source: tuple[str, int]) -> int:
    kind, i = source
    if kind == "stem":
        return cfg.stem_channels
    if kind == "t":
        return cfg.transformer_channels[i]
    if kind == "r":
        return cfg.cnn_channels[i]
    return cfg.stage_channels[i]


def expected_shapes(cfg: ModelConfig) -> list[tuple[str, StageSpec]]:
    """Named (resolution, channels) contract for every encoder and decoder tensor.

    Resolutions scale linearly with ``input_size``; at 224 they are exactly the
    published V1 dimension table. ``x_0_pooled`` is ``x_0`` as it enters the first
    fusion stage and ``coamamba`` is the bottleneck output before pooling.
    """
    check_config(cfg)
    out = [("I", StageSpec(0, cfg.input_size, cfg.in_channels))]
    for name, idx, stride, source in _ENCODER_LAYOUT + _DECODER_LAYOUT:
        out.append((name, StageSpec(idx, cfg.input_size // stride, _source_channels(cfg, source))))
    return out


def shape_table(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """``expected_shapes`` as a ``name -> (channels, height, width)`` mapping."""
    return {n: (s.channels, s.resolution, s.resolution) for n, s in expected_shapes(cfg)}


# -- flat ``key = value`` files -------------------------------------------------

def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in raw:
        return [_parse_value(p) for p in raw.split(",") if p.strip()]
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw.strip("\"'")


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_kv_lines(lines: Iterable[str]) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value'"])
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    """Parse ``key=value`` command-line overrides."""
    return parse_kv_lines(pairs)


def load_kv(path: str | Path) -> dict[str, Any]:
    return parse_kv_lines(Path(path).read_text().splitlines())


def dump_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def save_kv(values: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(dump_kv(values))


def config_to_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    return ModelConfig.from_dict(json.loads(text))
