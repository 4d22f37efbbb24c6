#!/usr/bin/env python3
"""
He initialization and Nesterov-momentum SGD for the tensor engine.
"""

import logging
from typing import Dict, Iterable, Optional

import numpy as np

from tensor_core import Parameter, Tensor

logger = logging.getLogger(__name__)


def he_init(weight: Tensor, fan_in: int, rng: np.random.Generator) -> None:
    """
    Fill ``weight`` in place with N(0, 2 / fan_in) samples.

    Args:
        weight: Tensor to overwrite
        fan_in: Cin*kh*kw for convolutions, C for the linear layer
        rng: Seeded generator; identical seeds give identical tensors
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    weight.data[...] = rng.normal(0.0, std, size=weight.shape).astype(weight.dtype)


def sgd_nesterov_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: Dict[str, np.ndarray],
) -> None:
    """
    One Nesterov SGD update without dampening.

    Per parameter w with gradient grad:
        g = grad + weight_decay * w
        v = momentum * v + g
        w = w - lr * (g + momentum * v)

    Args:
        params: Parameters to update; their ``tensor.grad`` is read
        lr: Learning rate
        momentum: Momentum coefficient
        weight_decay: L2 coefficient, applied only when ``decay_enabled``
        velocity: Per-name state, created as zeros on first use
    """
    for param in params:
        t = param.tensor
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        g = grad + weight_decay * t.data if param.decay_enabled and weight_decay else grad.copy()
        v = velocity.get(param.name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g
        velocity[param.name] = v.astype(t.dtype, copy=False)
        t.data -= (lr * (g + momentum * v)).astype(t.dtype, copy=False)


class SGDNesterov:
    """
    Stateful wrapper that owns the velocity buffers of a parameter set.

    Example:
        optimizer = SGDNesterov(model.parameters(), momentum=0.9, weight_decay=1e-4)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr=0.1)
    """

    def __init__(self, params: Iterable[Parameter], momentum: float = 0.9,
                 weight_decay: float = 1e-4, velocity: Optional[Dict[str, np.ndarray]] = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = dict(velocity or {})
        logger.debug(
            f"SGDNesterov over {len(self.params)} parameters "
            f"(momentum={momentum}, weight_decay={weight_decay})"
        )

    def zero_grad(self) -> None:
        for param in self.params:
            param.tensor.zero_grad()

    def step(self, lr: float) -> None:
        sgd_nesterov_step(self.params, lr, self.momentum, self.weight_decay, self.velocity)
