#!/usr/bin/env python3
"""
Minimal reverse-mode differentiable tensor engine.

Provides exactly the primitives the SparseNet family needs: convolution,
batch normalization, ReLU, pooling, channel concatenation, the linear
classifier, softmax cross-entropy and the multiplicative channel gate.
Every op records a backward closure on its output; ``Tensor.backward``
walks the recorded graph in reverse topological order.

Values are 32-bit by default. ``float64_mode()`` switches the default to
64-bit so finite-difference gradient checks are meaningful.
"""

import contextlib
import contextvars
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import LabelRangeError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_default_dtype: contextvars.ContextVar = contextvars.ContextVar(
    "sparsenet_default_dtype", default=np.float32
)

# Batch chunk for op-internal parallelism. Fixed so that reductions happen in
# the same order whatever the worker count.
CONV_CHUNK = 8

_pool_lock = threading.Lock()
_pool: Optional[ThreadPoolExecutor] = None
_num_workers = max(1, int(os.environ.get("SPARSENET_WORKERS", "1")))


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype.get())


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors and parameters in 64-bit precision inside the block."""
    token = _default_dtype.set(np.float64)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def set_num_workers(n: int) -> None:
    """
    Set the number of threads used inside ops.

    Args:
        n: Worker count (>= 1). Results do not depend on this value.
    """
    global _num_workers, _pool
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    with _pool_lock:
        if _pool is not None and n != _num_workers:
            _pool.shutdown(wait=True)
            _pool = None
        _num_workers = n
    logger.debug(f"tensor_core using {n} worker(s)")


def _map_chunks(fn: Callable[[slice], np.ndarray], total: int) -> List[np.ndarray]:
    """Apply fn to fixed-size batch slices, returning results in slice order."""
    global _pool
    slices = [slice(i, min(i + CONV_CHUNK, total)) for i in range(0, total, CONV_CHUNK)]
    if _num_workers == 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with _pool_lock:
        if _pool is None:
            _pool = ThreadPoolExecutor(max_workers=_num_workers, thread_name_prefix="tensor-op")
        pool = _pool
    return list(pool.map(fn, slices))


def _check_finite(op: str, values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return values


class Tensor:
    """
    Dense n-dimensional array with an attached gradient slot.

    Activations use NCHW layout. ``grad`` is allocated lazily on the first
    backward pass that reaches this tensor and always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, op: str, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(op, data)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _check_finite(f"{self._op} backward", grad)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this tensor.

        Args:
            grad: Upstream gradient; defaults to ones (scalar losses).
        """
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeError(f"upstream gradient shape {seed.shape} != tensor shape {self.data.shape}")
        self._accumulate(seed)
        for node in reversed(_topological_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


@dataclass
class Parameter:
    """A named trainable tensor. Names are path-like, e.g. ``block2.layer3.conv3x3.weight``."""

    name: str
    tensor: Tensor
    decay_enabled: bool = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


def parameter(name: str, shape: Tuple[int, ...], fill: float = 0.0,
              decay_enabled: bool = True) -> Parameter:
    return Parameter(name, Tensor(np.full(shape, fill), requires_grad=True), decay_enabled)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def create(cls, name: str, channels: int, epsilon: float = 1e-5,
               momentum: float = 0.9) -> "BatchNormState":
        dtype = default_dtype()
        return cls(
            gamma=parameter(f"{name}.gamma", (channels,), 1.0),
            beta=parameter(f"{name}.beta", (channels,), 0.0),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation without bias.

    Args:
        x: Input [N, Cin, H, W]
        weight: Kernel [Cout, Cin, kh, kw], kh and kw in {1, 3}
        stride: Positive stride
        padding: Zero padding on every side

    Returns:
        Tensor: [N, Cout, H', W']
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got rank {weight.data.ndim}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d input channels: input has {cin}, weight expects {wcin}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d kernel size must be 1 or 3, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_h % stride:
        raise ShapeError(f"conv2d height: ({h} + 2*{padding} - {kh}) not a multiple of stride {stride}")
    if span_w < 0 or span_w % stride:
        raise ShapeError(f"conv2d width: ({w} + 2*{padding} - {kw}) not a multiple of stride {stride}")
    oh, ow = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wdata = weight.data

    def forward_chunk(s: slice) -> np.ndarray:
        out = np.tensordot(windows[s], wdata, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)

    out = np.ascontiguousarray(np.concatenate(_map_chunks(forward_chunk, n), axis=0))

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            partials = _map_chunks(
                lambda s: np.tensordot(g[s], windows[s], axes=([0, 2, 3], [0, 2, 3])), n
            )
            dw = partials[0].copy()
            for part in partials[1:]:
                dw += part
            weight._accumulate(dw)
        if x.requires_grad:
            def input_chunk(s: slice) -> np.ndarray:
                gs = g[s]
                dxp = np.zeros((gs.shape[0], cin) + xp.shape[2:], dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.tensordot(gs, wdata[:, :, i, j], axes=([1], [0]))
                        dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                            contrib.transpose(0, 3, 1, 2)
                        )
                return dxp[:, :, padding:padding + h, padding:padding + w]

            x._accumulate(np.concatenate(_map_chunks(input_chunk, n), axis=0))

    return Tensor._from_op("conv2d", out, (x, weight), backward)


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """
    Per-channel batch normalization over N, H, W.

    In training mode normalizes with the (biased) batch statistics and folds
    them into the running averages; in evaluation mode only the running
    statistics are read.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D NCHW, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"batch_norm channels: input has {c}, state has {state.channels}")
    gamma, beta = state.gamma.tensor, state.beta.tensor
    g4 = gamma.data.reshape(1, c, 1, 1)
    count = n * h * w

    if training:
        if count < 2:
            raise ShapeError(f"batch_norm training needs N*H*W >= 2, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * g4
        if training:
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std.reshape(1, c, 1, 1) / count) * (count * dxhat - sum_d - xhat * sum_dx)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        x._accumulate(dx)

    return Tensor._from_op("batch_norm", out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return Tensor._from_op("relu", out, (x,), backward)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool_2x2 input must be 4-D NCHW, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial extent, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return Tensor._from_op("avg_pool_2x2", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W; output [N, C, 1, 1]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D NCHW, got rank {x.data.ndim}")
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g / (h * w), x.shape))

    return Tensor._from_op("global_avg_pool", out, (x,), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in the given order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for pos, t in enumerate(inputs):
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels input {pos} must be 4-D NCHW, got rank {t.data.ndim}")
        if t.shape[0] != ref[0]:
            raise ShapeError(f"concat_channels batch: input {pos} has {t.shape[0]}, expected {ref[0]}")
        if t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels spatial: input {pos} is {t.shape[2:]}, expected {ref[2:]}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            t._accumulate(g[:, lo:hi])

    return Tensor._from_op("concat_channels", out, tuple(inputs), backward)


def flatten(x: Tensor) -> Tensor:
    """Reshape [N, ...] to [N, prod(...)]."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(shape))

    return Tensor._from_op("flatten", out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x [N, C], weight [K, C], bias [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input features: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias: expected ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        bias._accumulate(g.sum(axis=0))

    return Tensor._from_op("linear", out, (x, weight, bias), backward)


def channel_gate(h: Tensor, f: Tensor) -> Tensor:
    """
    Apply a per-channel attention gate: H + H * F.

    Args:
        h: Layer output [N, k, H, W]
        f: Gate values [N, k, 1, 1], broadcast over the spatial dims
    """
    if h.data.ndim != 4 or f.data.ndim != 4:
        raise ShapeError(f"channel_gate expects 4-D tensors, got {h.shape} and {f.shape}")
    if f.shape[:2] != h.shape[:2] or f.shape[2:] != (1, 1):
        raise ShapeError(f"channel_gate gate shape {f.shape} incompatible with {h.shape}")
    out = h.data + h.data * f.data

    def backward(g: np.ndarray) -> None:
        h._accumulate(g * (1.0 + f.data))
        f._accumulate((g * h.data).sum(axis=(2, 3), keepdims=True))

    return Tensor._from_op("channel_gate", out, (h, f), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under softmax(logits).

    Returns a scalar tensor; its backward yields (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy batch: {n} logits rows, {labels.shape[0]} labels")
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise LabelRangeError(f"label {int(bad[0])} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = np.array(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    def backward(g: np.ndarray) -> None:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        logits._accumulate(grad * (g / n))

    return Tensor._from_op("softmax_cross_entropy", loss, (logits,), backward)
