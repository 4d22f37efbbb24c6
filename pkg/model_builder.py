#!/usr/bin/env python3
"""
Executable SparseNet models built from a LayerGraph.

Composite layers are pre-activation (BN -> ReLU -> Conv). Bottleneck layers
put a 1x1 convolution with 4k outputs ahead of the 3x3 convolution. In the
abc variant every composite layer carries an attention gate F whose result
recalibrates the layer output as H(x) + H(x) * F(x).
"""

import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from optim import he_init
from tensor_core import (
    BatchNormState,
    Parameter,
    Tensor,
    avg_pool_2x2,
    batch_norm,
    channel_gate,
    concat_channels,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    parameter,
    relu,
)
from errors import CheckpointMismatchError, ShapeError
from topology import LayerGraph, LayerWiring, NetworkSpec, build_layer_graph, gate_hidden_width

logger = logging.getLogger(__name__)


class ParameterRegistry:
    """Ordered, name-unique store of parameters and batch-norm states."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._norms: "OrderedDict[str, BatchNormState]" = OrderedDict()

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name}")
        self._params[param.name] = param
        return param

    def add_norm(self, name: str, channels: int) -> BatchNormState:
        if name in self._norms:
            raise ValueError(f"duplicate batch-norm name {name}")
        state = BatchNormState.create(name, channels)
        self.add(state.gamma)
        self.add(state.beta)
        self._norms[name] = state
        return state

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        """Running statistics keyed ``<bn>.running_mean`` / ``<bn>.running_var``."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, state in self._norms.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out


class Conv:
    """Bias-free convolution; padding keeps the spatial size for 3x3 kernels."""

    def __init__(self, registry: ParameterRegistry, name: str, in_channels: int,
                 out_channels: int, kernel: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.weight = registry.add(
            parameter(f"{name}.weight", (out_channels, in_channels, kernel, kernel))
        )
        he_init(self.weight.tensor, in_channels * kernel * kernel, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, stride=1, padding=self.kernel // 2)


class ConvModule:
    """BN -> ReLU -> Conv."""

    def __init__(self, registry: ParameterRegistry, name: str, in_channels: int,
                 out_channels: int, kernel: int, rng: np.random.Generator):
        self.norm = registry.add_norm(f"{name}.bn", in_channels)
        self.conv = Conv(registry, f"{name}.conv", in_channels, out_channels, kernel, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.conv(relu(batch_norm(x, self.norm, training)))


class AttentionGate:
    """
    Channel attention F(x): global pooling, a reducing 1x1 conv module and an
    expanding 1x1 conv module fed with both the pooled vector and the reduced
    one. The expanding module's output is used as is (no squashing).
    """

    def __init__(self, registry: ParameterRegistry, name: str, in_channels: int,
                 hidden: int, out_channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.hidden = hidden
        self.out_channels = out_channels
        self.reduce = ConvModule(registry, f"{name}.reduce", in_channels, hidden, 1, rng)
        self.expand = ConvModule(registry, f"{name}.expand", in_channels + hidden, out_channels, 1, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"attention gate expects {self.in_channels} channels, got {x.shape[1]}")
        pooled = global_avg_pool(x)
        reduced = self.reduce(pooled, training)
        return self.expand(concat_channels([pooled, reduced]), training)

    def zero_output(self) -> None:
        """Zero the final conv so F(x) = 0 and the gate becomes the identity."""
        self.expand.conv.weight.tensor.data[...] = 0.0


def attention_forward(gate: AttentionGate, x: Tensor, training: bool = True) -> Tensor:
    return gate(x, training)


class CompositeLayer:
    """
    One composite layer H of a sparse block.

    basic:      BN -> ReLU -> 3x3 conv (k)
    bottleneck: BN -> ReLU -> 1x1 conv (4k) -> BN -> ReLU -> 3x3 conv (k)

    An attached gate reads the input of the final BN -> ReLU -> 3x3 stage.
    """

    def __init__(self, registry: ParameterRegistry, name: str, wiring: LayerWiring,
                 rng: np.random.Generator, gate_hidden: Optional[int] = None):
        self.name = name
        self.wiring = wiring
        self.kind = "bottleneck" if wiring.bottleneck_channels else "basic"
        k = wiring.out_channels
        if wiring.bottleneck_channels:
            self.bottleneck = ConvModule(
                registry, f"{name}.bottleneck", wiring.in_channels, wiring.bottleneck_channels, 1, rng
            )
            final_in = wiring.bottleneck_channels
        else:
            self.bottleneck = None
            final_in = wiring.in_channels
        self.final = ConvModule(registry, f"{name}.conv3x3", final_in, k, 3, rng)
        self.gate = (
            AttentionGate(registry, f"{name}.attention", final_in, gate_hidden, k, rng)
            if gate_hidden else None
        )

    def __call__(self, sources: Sequence[Tensor], training: bool) -> Tensor:
        if len(sources) != len(self.wiring.sources):
            raise ShapeError(
                f"{self.name}: expected {len(self.wiring.sources)} sources, got {len(sources)}"
            )
        x = concat_channels(sources)
        if x.shape[1] != self.wiring.in_channels:
            raise ShapeError(
                f"{self.name}: input channels {x.shape[1]} != wiring {self.wiring.in_channels}"
            )
        if self.bottleneck is not None:
            x = self.bottleneck(x, training)
        h = self.final(x, training)
        if self.gate is None:
            return h
        return channel_gate(h, self.gate(x, training))


def composite_forward(layer: CompositeLayer, sources: Sequence[Tensor], training: bool) -> Tensor:
    return layer(sources, training)


class Transition:
    """BN -> ReLU -> 1x1 conv (floor(theta * C)) -> 2x2 average pooling."""

    def __init__(self, registry: ParameterRegistry, name: str, in_channels: int,
                 out_channels: int, rng: np.random.Generator):
        self.module = ConvModule(registry, name, in_channels, out_channels, 1, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return avg_pool_2x2(self.module(x, training))


def transition_forward(transition: Transition, x: Tensor, training: bool) -> Tensor:
    return transition(x, training)


class SparseNet:
    """
    Stem 3x3 conv -> sparse blocks separated by transitions -> BN -> ReLU ->
    global average pooling -> linear classifier.

    Example:
        model = build_network(preset("sparsenet-bc-v1"), np.random.default_rng(0))
        logits = model.forward(images, training=False)
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.graph: LayerGraph = build_layer_graph(spec)
        self.registry = ParameterRegistry()
        graph = self.graph
        gate_hidden = (
            gate_hidden_width(spec.growth_rate, spec.attention_reduction)
            if spec.variant.has_attention else None
        )

        self.stem = Conv(self.registry, "stem.conv", 3, graph.stem_channels, 3, rng)
        self.blocks: List[List[CompositeLayer]] = []
        self.transitions: List[Optional[Transition]] = []
        for block in graph.blocks:
            self.blocks.append([
                CompositeLayer(self.registry, f"block{block.index}.layer{layer.index}", layer, rng, gate_hidden)
                for layer in block.layers
            ])
            self.transitions.append(
                Transition(self.registry, f"transition{block.index}", block.out_channels,
                           block.transition_out, rng)
                if block.transition_out is not None else None
            )
        self.head_norm = self.registry.add_norm("head.bn", graph.classifier_in)
        self.classifier_weight = self.registry.add(
            parameter("classifier.weight", (spec.num_classes, graph.classifier_in))
        )
        self.classifier_bias = self.registry.add(parameter("classifier.bias", (spec.num_classes,)))
        he_init(self.classifier_weight.tensor, graph.classifier_in, rng)
        logger.info(
            f"Built {spec.display_name}: {self.parameter_count():,} parameters, "
            f"{sum(len(b) for b in self.blocks)} composite layers"
        )

    def forward(self, images: Tensor, training: bool) -> Tensor:
        h = self.stem(images)
        for layers, transition in zip(self.blocks, self.transitions):
            outputs = [h]
            for layer in layers:
                outputs.append(layer([outputs[s] for s in layer.wiring.sources], training))
            h = concat_channels(outputs)
            if transition is not None:
                h = transition(h, training)
        h = relu(batch_norm(h, self.head_norm, training))
        pooled = flatten(global_avg_pool(h))
        return linear(pooled, self.classifier_weight.tensor, self.classifier_bias.tensor)

    __call__ = forward

    def parameters(self) -> List[Parameter]:
        return self.registry.parameters()

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return self.registry.buffers()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def running_stat_count(self) -> int:
        return sum(b.size for b in self.buffers().values())

    def attention_gates(self) -> Iterator[AttentionGate]:
        for layers in self.blocks:
            for layer in layers:
                if layer.gate is not None:
                    yield layer.gate

    def zero_attention_gates(self) -> None:
        for gate in self.attention_gates():
            gate.zero_output()

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.tensor.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by running statistics, in registry order."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (p.name, p.tensor.data) for p in self.parameters()
        )
        out.update(self.buffers())
        return out

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        """
        Copy named tensors into the model; every expected name must be present
        with a matching shape and no extra names are allowed.
        """
        expected = self.state()
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        shape = {
            f"{name} {tensors[name].shape} != {target.shape}"
            for name, target in expected.items()
            if name in tensors and tensors[name].shape != target.shape
        }
        if missing or extra or shape:
            raise CheckpointMismatchError(missing, extra, shape)
        for name, target in expected.items():
            target[...] = tensors[name]


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> SparseNet:
    """Validate ``spec`` and build a He-initialized executable model."""
    return SparseNet(spec, rng)
