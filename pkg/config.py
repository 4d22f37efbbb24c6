#!/usr/bin/env python3
"""
Loader for ``key = value`` configuration files.

Sections:
    [model]  variant, blocks, growth_rate, path, farthest, nearest, compression,
             stem_channels, num_classes, attention_reduction, input_size, preset
    [train]  epochs, base_lr, milestones, momentum, weight_decay, batch_size,
             seed, eval_every, dataset, limit, record_wall_time
    [sweep]  see sweep.SweepSpec
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import ValidationError

from errors import ConfigError
from topology import ConnectivityRule, NetworkSpec, preset

logger = logging.getLogger(__name__)

MODEL_KEYS = frozenset({
    "variant", "blocks", "growth_rate", "path", "farthest", "nearest", "compression",
    "stem_channels", "num_classes", "attention_reduction", "input_size", "preset", "name",
})
TRAIN_KEYS = frozenset({
    "epochs", "base_lr", "milestones", "momentum", "weight_decay", "batch_size",
    "seed", "eval_every", "dataset", "limit", "record_wall_time", "scale_milestones",
})
SWEEP_KEYS = frozenset({
    "variant", "depths", "blocks", "growth_rates", "paths", "split_stride", "budget",
    "num_classes",
})
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "sweep": SWEEP_KEYS}

DATA_DIR_ENV = "SPARSENET_DATA_DIR"


@dataclass
class ConfigFile:
    """Raw sections of a parsed configuration file."""

    source: str
    model: Dict[str, str] = field(default_factory=dict)
    train: Dict[str, str] = field(default_factory=dict)
    sweep: Dict[str, str] = field(default_factory=dict)


def parse_config_text(text: str, source: str = "<string>") -> ConfigFile:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    parsed = ConfigFile(source)
    for section in parser.sections():
        allowed = SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"{source}: unknown section [{section}]")
        values = dict(parser.items(section))
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{section}]: {', '.join(unknown)}")
        setattr(parsed, section, values)
    return parsed


def load_config(path: Union[str, Path]) -> ConfigFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, str(path))


def _opt_int(values: Dict[str, str], key: str) -> Optional[int]:
    raw = values.get(key)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")


def rule_from_fields(path: Optional[str], farthest: Optional[int],
                     nearest: Optional[int]) -> ConnectivityRule:
    """
    Resolve the connectivity rule. ``path`` expands to the default split unless
    farthest/nearest are given; one explicit side takes the remainder of path.
    """
    if path is not None and path.strip().lower() == "dense":
        return ConnectivityRule.dense()
    total = None
    if path is not None:
        try:
            total = int(path)
        except ValueError:
            raise ConfigError(f"path: expected an integer or 'dense', got {path!r}")
    if farthest is None and nearest is None:
        if total is None:
            raise ConfigError("model: one of path or farthest/nearest is required")
        return ConnectivityRule.from_path(total)
    if farthest is None:
        farthest = (total - nearest) if total is not None else 0
    if nearest is None:
        nearest = (total - farthest) if total is not None else 0
    if total is not None and farthest + nearest != total:
        raise ConfigError(f"path: {total} != farthest {farthest} + nearest {nearest}")
    return ConnectivityRule(farthest=farthest, nearest=nearest)


def network_spec_from_section(values: Dict[str, str]) -> NetworkSpec:
    """Turn a [model] section into a NetworkSpec (validation is separate)."""
    if "preset" in values:
        overrides = sorted(set(values) - {"preset", "num_classes"})
        if overrides:
            raise ConfigError(f"model: preset cannot be combined with {', '.join(overrides)}")
        return preset(values["preset"], num_classes=_opt_int(values, "num_classes") or 10)
    rule = rule_from_fields(values.get("path"), _opt_int(values, "farthest"),
                            _opt_int(values, "nearest"))
    fields = {k: v for k, v in values.items() if k not in ("path", "farthest", "nearest")}
    fields["rule"] = rule
    try:
        return NetworkSpec.model_validate(fields)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("model: " + "; ".join(problems)) from e


def spec_to_text(spec: NetworkSpec) -> str:
    """Serialize a NetworkSpec back into a [model] section."""
    lines = ["[model]"]
    if spec.name:
        lines.append(f"name = {spec.name}")
    lines += [
        f"variant = {spec.variant.value}",
        f"blocks = {','.join(str(b) for b in spec.blocks)}",
        f"growth_rate = {spec.growth_rate}",
    ]
    if spec.rule.is_dense:
        lines.append("path = dense")
    else:
        lines += [f"farthest = {spec.rule.farthest}", f"nearest = {spec.rule.nearest}"]
    lines += [
        f"compression = {spec.compression}",
        f"stem_channels = {spec.stem_channels}",
        f"num_classes = {spec.num_classes}",
        f"attention_reduction = {spec.attention_reduction}",
        f"input_size = {spec.input_size}",
    ]
    return "\n".join(lines) + "\n"


def default_data_dir() -> Optional[str]:
    return os.environ.get(DATA_DIR_ENV)


def parse_count(text: str) -> int:
    """Integer with an optional K/M suffix: ``"1M"`` -> 1000000, ``"850K"`` -> 850000."""
    value = str(text).strip().upper()
    scale = {"K": 1_000, "M": 1_000_000}.get(value[-1:], 1)
    try:
        return int(round(float(value.rstrip("KM")) * scale))
    except ValueError:
        raise ValueError(f"invalid count {text!r} (e.g. 1000000, 1M, 850K)")
