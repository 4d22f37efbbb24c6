#!/usr/bin/env python3
"""
Sparse connectivity rule and LayerGraph elaboration.

A sparse block keeps, for composite layer i, only the ``farthest`` earliest
and the ``nearest`` most recent of its predecessors (source 0 is the block
input). When farthest + nearest covers every predecessor the block is an
ordinary dense block, so DenseNet is the special case of an unbounded rule.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import SpecValidationError

logger = logging.getLogger(__name__)

# Farthest side of the dense rule; larger than any block length.
UNBOUNDED = 1 << 30

DEFAULT_INPUT_SIZE = 32
BOTTLENECK_FACTOR = 4


class Variant(str, Enum):
    BASIC = "basic"
    BC = "bc"
    ABC = "abc"

    @property
    def has_bottleneck(self) -> bool:
        return self is not Variant.BASIC

    @property
    def has_attention(self) -> bool:
        return self is Variant.ABC


class ConnectivityRule(BaseModel):
    """Number of farthest (f) and nearest (r) predecessors a layer keeps."""

    model_config = ConfigDict(frozen=True)

    farthest: int
    nearest: int

    @classmethod
    def from_path(cls, path: int) -> "ConnectivityRule":
        """Default split: the odd connection goes to the farthest side."""
        return cls(farthest=math.ceil(path / 2), nearest=path // 2)

    @classmethod
    def dense(cls) -> "ConnectivityRule":
        return cls(farthest=UNBOUNDED, nearest=0)

    @property
    def path(self) -> int:
        return self.farthest + self.nearest

    @property
    def is_dense(self) -> bool:
        return self.farthest >= UNBOUNDED or self.nearest >= UNBOUNDED

    def label(self) -> str:
        return "dense" if self.is_dense else f"{self.farthest}-{self.nearest}"

    def path_label(self) -> str:
        return "dense" if self.is_dense else str(self.path)


class NetworkSpec(BaseModel):
    """
    Declarative description of a SparseNet / DenseNet model.

    Variant-dependent defaults are filled in when omitted: compression is 1
    for basic and 0.5 otherwise; stem channels are 16 for basic and twice the
    growth rate otherwise.
    """

    model_config = ConfigDict(frozen=True)

    variant: Variant
    blocks: Tuple[int, ...]
    growth_rate: int
    rule: ConnectivityRule
    compression: float
    stem_channels: int
    num_classes: int = 10
    attention_reduction: int = 8
    input_size: int = DEFAULT_INPUT_SIZE
    name: str = ""

    @model_validator(mode="before")
    @classmethod
    def _variant_defaults(cls, values):
        if not isinstance(values, dict):
            return values
        values = dict(values)
        variant = values.get("variant")
        basic = variant in (Variant.BASIC, "basic")
        if values.get("compression") is None:
            values["compression"] = 1.0 if basic else 0.5
        if values.get("stem_channels") is None and values.get("growth_rate") is not None:
            values["stem_channels"] = 16 if basic else 2 * int(values["growth_rate"])
        return values

    @field_validator("blocks", mode="before")
    @classmethod
    def _parse_blocks(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace("-", ",").split(",") if part.strip())
        return value

    def with_rule(self, rule: ConnectivityRule) -> "NetworkSpec":
        return self.model_copy(update={"rule": rule})

    def with_growth(self, growth_rate: int) -> "NetworkSpec":
        update = {"growth_rate": growth_rate}
        if self.variant is not Variant.BASIC and self.stem_channels == 2 * self.growth_rate:
            update["stem_channels"] = 2 * growth_rate
        return self.model_copy(update=update)

    @property
    def display_name(self) -> str:
        if self.name:
            return self.name
        arrangement = "-".join(str(b) for b in self.blocks)
        return f"{self.variant.value}-{arrangement}-k{self.growth_rate}-p{self.rule.path_label()}"


@dataclass(frozen=True)
class LayerWiring:
    """Wiring of one composite layer (1-based index within its block)."""

    index: int
    sources: Tuple[int, ...]
    in_channels: int
    out_channels: int
    bottleneck_channels: Optional[int]


@dataclass(frozen=True)
class BlockGraph:
    index: int
    in_channels: int
    spatial: int
    layers: Tuple[LayerWiring, ...]
    out_channels: int
    transition_out: Optional[int]


@dataclass(frozen=True)
class LayerGraph:
    spec: NetworkSpec
    stem_channels: int
    blocks: Tuple[BlockGraph, ...]
    classifier_in: int

    def layers(self) -> List[Tuple[BlockGraph, LayerWiring]]:
        return [(block, layer) for block in self.blocks for layer in block.layers]

    def describe(self) -> List[str]:
        """Human-readable wiring, one line per stem, layer, transition and head."""
        lines = [f"{self.spec.display_name}", f"stem: 3 -> {self.stem_channels}"]
        for block in self.blocks:
            lines.append(
                f"block {block.index}: {block.spatial}x{block.spatial}, "
                f"{block.in_channels} in, {block.out_channels} out"
            )
            for layer in block.layers:
                width = f" -> {layer.bottleneck_channels}" if layer.bottleneck_channels else ""
                sources = ",".join(str(s) for s in layer.sources)
                lines.append(
                    f"  layer {layer.index}: sources [{sources}] "
                    f"{layer.in_channels}{width} -> {layer.out_channels}"
                )
            if block.transition_out is not None:
                lines.append(f"transition {block.index}: {block.out_channels} -> {block.transition_out}")
        lines.append(f"classifier: {self.classifier_in} -> {self.spec.num_classes}")
        return lines


def input_sources(i: int, rule: ConnectivityRule) -> Tuple[int, ...]:
    """
    Sources feeding composite layer ``i``.

    Args:
        i: 1-based layer index within the block
        rule: Connectivity rule

    Returns:
        Sorted tuple drawn from {0..i-1}: the first ``farthest`` and the last
        ``nearest`` predecessors. Equals all predecessors while i <= f + r.
    """
    if i < 1:
        raise ValueError(f"layer index must be >= 1, got {i}")
    if rule.path < 1:
        raise ValueError("connectivity rule needs farthest + nearest >= 1")
    far = range(0, min(rule.farthest, i))
    near = range(max(0, i - rule.nearest), i)
    return tuple(sorted(set(far) | set(near)))


def validate_spec(spec: NetworkSpec) -> List[str]:
    """
    Check a NetworkSpec and return every violation found (empty when valid).
    """
    problems: List[str] = []
    if not spec.blocks:
        problems.append("blocks: at least one block is required")
    for pos, layers in enumerate(spec.blocks, start=1):
        if layers < 1:
            problems.append(f"blocks: block {pos} has {layers} layers, needs >= 1")
    if spec.growth_rate < 1:
        problems.append(f"growth_rate: must be >= 1, got {spec.growth_rate}")
    if spec.rule.farthest < 0:
        problems.append(f"farthest: must be >= 0, got {spec.rule.farthest}")
    if spec.rule.nearest < 0:
        problems.append(f"nearest: must be >= 0, got {spec.rule.nearest}")
    if spec.rule.path < 1:
        problems.append(f"path: farthest + nearest must be >= 1, got {spec.rule.path}")
    if not 0.0 < spec.compression <= 1.0:
        problems.append(f"compression: must lie in (0, 1], got {spec.compression}")
    elif (spec.compression == 1.0) != (spec.variant is Variant.BASIC):
        problems.append(
            f"compression: {spec.compression} is inconsistent with variant {spec.variant.value} "
            "(1 for basic only)"
        )
    if spec.stem_channels < 1:
        problems.append(f"stem_channels: must be >= 1, got {spec.stem_channels}")
    if spec.num_classes < 1:
        problems.append(f"num_classes: must be >= 1, got {spec.num_classes}")
    if spec.attention_reduction < 1:
        problems.append(f"attention_reduction: must be >= 1, got {spec.attention_reduction}")

    pools = max(len(spec.blocks) - 1, 0)
    if spec.input_size < 1 or spec.input_size % (2 ** pools):
        problems.append(
            f"input_size: {spec.input_size} cannot be halved {pools} time(s) by 2x2 pooling"
        )

    if not problems:
        channels = spec.stem_channels
        for pos, layers in enumerate(spec.blocks[:-1], start=1):
            out = channels + layers * spec.growth_rate
            channels = math.floor(spec.compression * out)
            if channels < 1:
                problems.append(f"compression: transition {pos} would keep no channels")
                break
    return problems


def ensure_valid(spec: NetworkSpec) -> NetworkSpec:
    problems = validate_spec(spec)
    if problems:
        raise SpecValidationError(problems)
    return spec


def build_layer_graph(spec: NetworkSpec) -> LayerGraph:
    """
    Elaborate a NetworkSpec into explicit per-layer wiring and channel counts.

    Block output is the concatenation of the block input and every layer
    output, so a transition sees c0 + L*k channels and emits floor(theta * C).
    """
    ensure_valid(spec)
    k = spec.growth_rate
    bottleneck = BOTTLENECK_FACTOR * k if spec.variant.has_bottleneck else None
    blocks: List[BlockGraph] = []
    c0 = spec.stem_channels
    spatial = spec.input_size
    for b, num_layers in enumerate(spec.blocks, start=1):
        layers = []
        for i in range(1, num_layers + 1):
            sources = input_sources(i, spec.rule)
            in_channels = (c0 if 0 in sources else 0) + k * sum(1 for s in sources if s)
            layers.append(LayerWiring(i, sources, in_channels, k, bottleneck))
        out = c0 + num_layers * k
        last = b == len(spec.blocks)
        transition_out = None if last else math.floor(spec.compression * out)
        blocks.append(BlockGraph(b, c0, spatial, tuple(layers), out, transition_out))
        if not last:
            c0 = transition_out
            spatial //= 2
    graph = LayerGraph(spec, spec.stem_channels, tuple(blocks), blocks[-1].out_channels)
    logger.debug(f"Built layer graph for {spec.display_name}: classifier input {graph.classifier_in}")
    return graph


def count_connections(spec: NetworkSpec) -> int:
    """Total number of retained input connections over all composite layers."""
    return sum(
        len(input_sources(i, spec.rule))
        for num_layers in spec.blocks
        for i in range(1, num_layers + 1)
    )


def gate_hidden_width(growth_rate: int, reduction: int) -> int:
    """Hidden width of the attention gate: max(4, k // reduction)."""
    return max(4, growth_rate // reduction)


def reported_depth(spec: NetworkSpec) -> int:
    """
    Depth as reported in the literature: stem conv, one (basic) or two
    (bottleneck) convs per composite layer, one conv per transition and the
    classifier.
    """
    per_layer = 2 if spec.variant.has_bottleneck else 1
    return 1 + per_layer * sum(spec.blocks) + (len(spec.blocks) - 1) + 1


def drop_patterns(path: int, stride: int = 1) -> List[ConnectivityRule]:
    """
    Every (farthest, nearest) split of ``path`` from (path, 0) down to (0, path).
    """
    if path < 1 or stride < 1:
        raise ValueError(f"drop_patterns needs path >= 1 and stride >= 1, got {path}/{stride}")
    farthest = list(range(path, -1, -stride))
    if farthest[-1] != 0:
        farthest.append(0)
    return [ConnectivityRule(farthest=f, nearest=path - f) for f in farthest]


# name -> (variant, blocks, growth rate, path or None for dense)
_PRESET_TABLE: Dict[str, Tuple[str, Tuple[int, ...], int, Optional[int]]] = {
    "sparsenet-v1": ("basic", (8, 12, 16), 16, 14),
    "sparsenet-v2": ("basic", (12, 18, 24), 24, 21),
    "sparsenet-v3": ("basic", (16, 24, 32), 32, 28),
    "sparsenet-v4": ("basic", (20, 30, 40), 50, 35),
    "sparsenet-bc-v1": ("bc", (8, 12, 16), 16, 14),
    "sparsenet-bc-v2": ("bc", (12, 18, 24), 24, 21),
    "sparsenet-bc-v3": ("bc", (16, 24, 32), 32, 28),
    "sparsenet-bc-v4": ("bc", (20, 30, 40), 50, 35),
    "sparsenet-abc-v1": ("abc", (8, 12, 16), 16, 14),
    "sparsenet-abc-v2": ("abc", (12, 18, 24), 24, 21),
    "sparsenet-abc-v3": ("abc", (16, 24, 32), 32, 28),
    "sparsenet-abc-v4": ("abc", (20, 30, 40), 50, 35),
    "densenet-40-12": ("basic", (12, 12, 12), 12, None),
    "densenet-bc-100-12": ("bc", (16, 16, 16), 12, None),
    "densenet-bc-190-40": ("bc", (31, 31, 31), 40, None),
}

# Published (params in millions, depth) for the presets above.
PUBLISHED: Dict[str, Tuple[float, int]] = {
    "sparsenet-v1": (1.20, 40),
    "sparsenet-v2": (5.70, 68),
    "sparsenet-v3": (17.5, 76),
    "sparsenet-v4": (65.7, 96),
    "sparsenet-bc-v1": (0.83, 76),
    "sparsenet-bc-v2": (3.45, 132),
    "sparsenet-bc-v3": (9.69, 148),
    "sparsenet-bc-v4": (34.3, 184),
    "sparsenet-abc-v1": (0.86, 76),
    "sparsenet-abc-v2": (3.56, 132),
    "sparsenet-abc-v3": (9.92, 148),
    "sparsenet-abc-v4": (35.0, 184),
    "densenet-40-12": (1.0, 40),
    "densenet-bc-100-12": (0.8, 100),
    "densenet-bc-190-40": (25.6, 190),
}

PRESETS = tuple(_PRESET_TABLE)


def paper_depth(name: str) -> int:
    """Depth stated alongside the published results for a preset."""
    try:
        return PUBLISHED[name][1]
    except KeyError:
        raise SpecValidationError([f"preset: unknown name {name!r}; known: {', '.join(PRESETS)}"])


def preset(name: str, num_classes: int = 10) -> NetworkSpec:
    """
    Build a named configuration (the published V1-V4 setups and DenseNet cases).
    """
    try:
        variant, blocks, growth, path = _PRESET_TABLE[name]
    except KeyError:
        raise SpecValidationError([f"preset: unknown name {name!r}; known: {', '.join(PRESETS)}"])
    rule = ConnectivityRule.dense() if path is None else ConnectivityRule.from_path(path)
    spec = NetworkSpec(
        variant=variant, blocks=blocks, growth_rate=growth, rule=rule,
        num_classes=num_classes, name=name,
    )
    depth = reported_depth(spec)
    published = paper_depth(name)
    if depth != published:
        logger.warning(f"{name}: computed depth {depth} differs from published depth {published}")
    return spec
