#!/usr/bin/env python3
"""
Static parameter, FLOP and connection counting over a LayerGraph.

Counts are computed from the wiring alone, independently of the executable
model, so they can be checked against the model's parameter registry.

FLOP convention: 2 FLOPs per multiply-accumulate, convolutions and the final
linear layer only (pooling, BN and ReLU are free).
"""

import csv
import io
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

from errors import BudgetError, ReportFormatError
from topology import (
    ConnectivityRule,
    LayerGraph,
    NetworkSpec,
    build_layer_graph,
    count_connections,
    gate_hidden_width,
    reported_depth,
)

logger = logging.getLogger(__name__)

CSV_FIELDS = ("name", "variant", "depth", "growth", "path", "params", "flops", "connections")
REPORT_FORMATS = ("text", "csv", "json-lines")


@dataclass
class ParamCount:
    total: int
    by_group: Dict[str, int]
    running_stats: int


@dataclass
class FlopCount:
    total: int
    by_group: Dict[str, int]
    input_size: int


@dataclass
class AnalysisReport:
    name: str
    variant: str
    depth: int
    growth: int
    path: str
    params: int
    flops: int
    connections: int
    params_by_group: Dict[str, int] = field(default_factory=dict)
    flops_by_group: Dict[str, int] = field(default_factory=dict)
    running_stats: int = 0
    input_size: int = 32

    def row(self) -> "OrderedDict[str, object]":
        return OrderedDict((key, getattr(self, key)) for key in CSV_FIELDS)


def _conv_params(cin: int, cout: int, kernel: int) -> int:
    return cout * cin * kernel * kernel


def count_params(spec: NetworkSpec, graph: Optional[LayerGraph] = None) -> ParamCount:
    """
    Exact trainable parameter count (conv weights, BN gamma/beta, classifier).

    Running BN statistics are reported separately in ``running_stats``.
    """
    graph = graph or build_layer_graph(spec)
    k = spec.growth_rate
    groups: "OrderedDict[str, int]" = OrderedDict()
    bn_channels = 0

    groups["stem"] = _conv_params(3, graph.stem_channels, 3)
    attention = 0
    for block in graph.blocks:
        total = 0
        for layer in block.layers:
            bn_channels += layer.in_channels
            if layer.bottleneck_channels:
                b = layer.bottleneck_channels
                total += 2 * layer.in_channels + _conv_params(layer.in_channels, b, 1)
                total += 2 * b + _conv_params(b, k, 3)
                bn_channels += b
                gate_in = b
            else:
                total += 2 * layer.in_channels + _conv_params(layer.in_channels, k, 3)
                gate_in = layer.in_channels
            if spec.variant.has_attention:
                c, d = gate_in, gate_hidden_width(spec.growth_rate, spec.attention_reduction)
                attention += 2 * c + _conv_params(c, d, 1) + 2 * (c + d) + _conv_params(c + d, k, 1)
                bn_channels += c + (c + d)
        groups[f"block{block.index}"] = total
        if block.transition_out is not None:
            groups[f"transition{block.index}"] = (
                2 * block.out_channels + _conv_params(block.out_channels, block.transition_out, 1)
            )
            bn_channels += block.out_channels
    if spec.variant.has_attention:
        groups["attention"] = attention
    groups["head"] = 2 * graph.classifier_in + spec.num_classes * graph.classifier_in + spec.num_classes
    bn_channels += graph.classifier_in
    return ParamCount(sum(groups.values()), dict(groups), 2 * bn_channels)


def count_flops(spec: NetworkSpec, input_hw: Optional[int] = None,
                graph: Optional[LayerGraph] = None) -> FlopCount:
    """
    Convolution + classifier FLOPs for one image of size input_hw x input_hw.
    """
    size = input_hw or spec.input_size
    if size != spec.input_size:
        spec = spec.model_copy(update={"input_size": size})
        graph = None
    graph = graph or build_layer_graph(spec)
    k = spec.growth_rate
    groups: "OrderedDict[str, int]" = OrderedDict()

    def conv(area: int, cin: int, cout: int, kernel: int) -> int:
        return 2 * area * cout * cin * kernel * kernel

    groups["stem"] = conv(size * size, 3, graph.stem_channels, 3)
    attention = 0
    for block in graph.blocks:
        area = block.spatial * block.spatial
        total = 0
        for layer in block.layers:
            if layer.bottleneck_channels:
                b = layer.bottleneck_channels
                total += conv(area, layer.in_channels, b, 1) + conv(area, b, k, 3)
                gate_in = b
            else:
                total += conv(area, layer.in_channels, k, 3)
                gate_in = layer.in_channels
            if spec.variant.has_attention:
                c, d = gate_in, gate_hidden_width(spec.growth_rate, spec.attention_reduction)
                attention += conv(1, c, d, 1) + conv(1, c + d, k, 1)
        groups[f"block{block.index}"] = total
        if block.transition_out is not None:
            groups[f"transition{block.index}"] = conv(area, block.out_channels, block.transition_out, 1)
    if spec.variant.has_attention:
        groups["attention"] = attention
    groups["head"] = 2 * spec.num_classes * graph.classifier_in
    return FlopCount(sum(groups.values()), dict(groups), size)


def analyze(spec: NetworkSpec, input_hw: Optional[int] = None) -> AnalysisReport:
    """Full AnalysisReport for one spec."""
    graph = build_layer_graph(spec)
    params = count_params(spec, graph)
    flops = count_flops(spec, input_hw)
    return AnalysisReport(
        name=spec.display_name,
        variant=spec.variant.value,
        depth=reported_depth(spec),
        growth=spec.growth_rate,
        path=spec.rule.path_label(),
        params=params.total,
        flops=flops.total,
        connections=count_connections(spec),
        params_by_group=params.by_group,
        flops_by_group=flops.by_group,
        running_stats=params.running_stats,
        input_size=flops.input_size,
    )


@dataclass
class PathSolution:
    path: int
    params: int


def solve_path(template: NetworkSpec, param_budget: int) -> PathSolution:
    """
    Largest path (default split) whose parameter count fits ``param_budget``.

    Parameter count is non-decreasing in path and saturates at the longest
    block length, where the rule is dense.

    Raises:
        BudgetError: the budget is below the path = 1 cost
    """
    longest = max(template.blocks)

    def cost(path: int) -> int:
        return count_params(template.with_rule(ConnectivityRule.from_path(path))).total

    floor_cost = cost(1)
    if floor_cost > param_budget:
        raise BudgetError(
            f"{template.display_name}: budget {param_budget:,} below the path=1 cost {floor_cost:,}"
        )
    lo, hi = 1, longest
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if cost(mid) <= param_budget:
            lo = mid
        else:
            hi = mid - 1
    solution = PathSolution(lo, cost(lo))
    logger.debug(f"solve_path {template.display_name}: path {solution.path} -> {solution.params:,}")
    return solution


def emit_report(reports: Sequence[AnalysisReport], fmt: str = "text") -> str:
    """
    Serialize reports as ``text``, ``csv`` (fixed header) or ``json-lines``.
    """
    if fmt not in REPORT_FORMATS:
        raise ReportFormatError(f"unknown format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(report.row())
        return buf.getvalue()
    if fmt == "json-lines":
        lines = []
        for report in reports:
            record = report.row()
            record["running_stats"] = report.running_stats
            record["input_size"] = report.input_size
            record["params_by_group"] = report.params_by_group
            record["flops_by_group"] = report.flops_by_group
            lines.append(json.dumps(record))
        return "\n".join(lines) + ("\n" if lines else "")

    blocks = []
    for report in reports:
        lines = [
            f"name: {report.name}",
            f"variant: {report.variant}",
            f"depth: {report.depth}",
            f"growth: {report.growth}",
            f"path: {report.path}",
            f"params: {report.params} ({report.params / 1e6:.2f}M)",
            f"flops: {report.flops} ({report.flops / 1e6:.1f}M at {report.input_size}x{report.input_size})",
            f"connections: {report.connections}",
            f"running_stats: {report.running_stats}",
        ]
        lines += [f"  params[{group}]: {count}" for group, count in report.params_by_group.items()]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")
