#!/usr/bin/env python3
"""
Sweep generation for connectivity and capacity studies.

Two modes:
    drop patterns   fixed arrangement and path; every (farthest, nearest) split
                    from (path, 0) to (0, path) at ``split_stride``
    budget          depths x growth rates, each with the largest path that fits
                    ``budget`` parameters

Values accept comma lists and inclusive ranges ``start:stop[:step]``,
e.g. ``growth_rates = 6:26:10`` -> 6, 16, 26.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from analyzers import AnalysisReport, analyze, emit_report, solve_path
from config import parse_count
from errors import BudgetError, ConfigError
from topology import ConnectivityRule, NetworkSpec, Variant, drop_patterns, ensure_valid

logger = logging.getLogger(__name__)


def parse_int_list(text: str) -> Tuple[int, ...]:
    """``"6,16"`` or ``"6:26:10"`` (inclusive) or a mix of both."""
    values: List[int] = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            parts = [int(p) for p in item.split(":")]
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] < 1):
                raise ValueError(f"range {item!r} must be start:stop[:step] with step >= 1")
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1
            values.extend(range(start, stop + 1, step))
        else:
            values.append(int(item))
    return tuple(values)


def blocks_for_depth(variant: Variant, depth: int, num_blocks: int = 3) -> Tuple[int, ...]:
    """
    Equal blocks for a reported depth: (depth - 4) / 3 layers per block for
    basic, (depth - 4) / 6 for bottleneck variants.
    """
    per_layer = 2 if variant.has_bottleneck else 1
    convs = depth - 1 - (num_blocks - 1) - 1
    if convs <= 0 or convs % (per_layer * num_blocks):
        raise ValueError(
            f"depth {depth} does not give whole {variant.value} blocks "
            f"(needs depth - {num_blocks + 1} divisible by {per_layer * num_blocks})"
        )
    return (convs // (per_layer * num_blocks),) * num_blocks


class SweepSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: Variant = Variant.BC
    blocks: Optional[Tuple[int, ...]] = None
    depths: Tuple[int, ...] = ()
    growth_rates: Tuple[int, ...] = (12,)
    paths: Tuple[int, ...] = ()
    split_stride: Optional[int] = None
    budget: Optional[int] = None
    num_classes: int = 10

    @field_validator("blocks", mode="before")
    @classmethod
    def _parse_blocks(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace("-", ",").split(",") if part.strip())
        return value

    @field_validator("depths", "growth_rates", "paths", mode="before")
    @classmethod
    def _parse_lists(cls, value):
        if isinstance(value, (str, int)):
            return parse_int_list(str(value))
        return value

    @field_validator("budget", mode="before")
    @classmethod
    def _parse_budget(cls, value):
        if isinstance(value, str):
            return parse_count(value)
        return value

    @model_validator(mode="after")
    def _check_mode(self):
        if self.budget is not None:
            if self.paths:
                raise ValueError("budget and paths are mutually exclusive")
            if not self.depths and self.blocks is None:
                raise ValueError("budget sweeps need depths or blocks")
        elif not self.paths:
            raise ValueError("either paths or budget is required")
        if self.depths and self.blocks is not None:
            raise ValueError("depths and blocks are mutually exclusive")
        if self.split_stride is not None and self.split_stride < 1:
            raise ValueError(f"split_stride must be >= 1, got {self.split_stride}")
        return self

    def arrangements(self) -> List[Tuple[int, ...]]:
        if self.depths:
            return [blocks_for_depth(self.variant, depth) for depth in self.depths]
        return [self.blocks] if self.blocks is not None else []


def sweep_spec_from_section(values: Dict[str, str]) -> SweepSpec:
    try:
        return SweepSpec.model_validate(values)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"sweep: {e}") from e


@dataclass
class SweepResult:
    specs: List[NetworkSpec]
    reports: List[AnalysisReport]
    skipped: List[str] = field(default_factory=list)

    def csv(self) -> str:
        return emit_report(self.reports, "csv")


def _rules(sweep: SweepSpec, path: int) -> List[ConnectivityRule]:
    if sweep.split_stride is None:
        return [ConnectivityRule.from_path(path)]
    return drop_patterns(path, sweep.split_stride)


def generate_sweep(sweep: SweepSpec) -> SweepResult:
    """
    Expand a SweepSpec into the cross product of its variations and analyze
    each point. Budget points whose path = 1 cost exceeds the budget are
    skipped and listed in ``skipped``.

    Raises:
        ConfigError: the product is empty
    """
    try:
        arrangements = sweep.arrangements()
    except ValueError as e:
        raise ConfigError(f"sweep: {e}") from e
    if not arrangements or not sweep.growth_rates:
        raise ConfigError("sweep: empty product (no arrangements or growth rates)")

    specs: List[NetworkSpec] = []
    skipped: List[str] = []
    for blocks in arrangements:
        for growth in sweep.growth_rates:
            base = NetworkSpec(
                variant=sweep.variant, blocks=blocks, growth_rate=growth,
                rule=ConnectivityRule.from_path(1), num_classes=sweep.num_classes,
            )
            if sweep.budget is not None:
                ensure_valid(base)
                try:
                    solution = solve_path(base, sweep.budget)
                except BudgetError as e:
                    logger.warning(f"Skipping sweep point: {e}")
                    skipped.append(base.display_name)
                    continue
                specs.append(ensure_valid(base.with_rule(ConnectivityRule.from_path(solution.path))))
                continue
            for path in sweep.paths:
                for rule in _rules(sweep, path):
                    specs.append(ensure_valid(base.with_rule(rule)))

    if not specs:
        raise ConfigError(f"sweep: empty product ({len(skipped)} point(s) over budget)")
    reports = [analyze(spec) for spec in specs]
    logger.info(f"Sweep generated {len(specs)} spec(s), skipped {len(skipped)}")
    return SweepResult(specs, reports, skipped)
