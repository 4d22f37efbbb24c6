#!/usr/bin/env python3
"""
Central finite-difference gradient checking.

The op under test is evaluated in 64-bit mode; its output is projected onto a
fixed random direction so every output element contributes to the scalar
being differentiated.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from tensor_core import Parameter, Tensor, float64_mode

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """Worst norm-wise relative error over the checked inputs (or parameters), and each one's error."""

    max_normwise_error: float
    tolerance: float
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_normwise_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / (||a|| + ||n||); 0 when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-6,
    step: float = 1e-6,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compare analytic gradients of ``fn`` against central differences.

    Args:
        fn: Callable mapping input Tensors to an output Tensor
        inputs: Points at which to check, one array per argument
        tolerance: Pass threshold on the worst norm-wise relative error
        step: Finite-difference step
        rng: Generator for the projection direction

    Returns:
        GradCheckReport: Worst norm-wise relative error over all inputs
    """
    rng = rng or np.random.default_rng(0)
    with float64_mode():
        points = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [Tensor(p, requires_grad=True) for p in points]
        out = fn(*tensors)
        direction = rng.standard_normal(out.shape)
        out.backward(direction)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def objective() -> float:
            values = fn(*[Tensor(p) for p in points]).data
            return float(np.sum(values * direction))

        errors = []
        for point, grad in zip(points, analytic):
            numeric = np.zeros_like(point)
            flat, nflat = point.reshape(-1), numeric.reshape(-1)
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + step
                plus = objective()
                flat[idx] = original - step
                minus = objective()
                flat[idx] = original
                nflat[idx] = (plus - minus) / (2.0 * step)
            errors.append(relative_error(grad, numeric))

    report = GradCheckReport(max(errors) if errors else 0.0, tolerance, errors)
    logger.debug(f"grad_check max norm-wise relative error {report.max_normwise_error:.3e} (tol {tolerance:.1e})")
    return report


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-5,
    step: float = 1e-6,
    entries_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Check d(loss)/d(param) for every parameter of a model built in 64-bit mode.

    Args:
        loss_fn: Re-runs the forward pass and returns a scalar loss
        params: Parameters to perturb in place
        tolerance: Pass threshold on the worst norm-wise relative error
        step: Finite-difference step
        entries_per_param: Sample this many entries per parameter (all when None)
        rng: Generator for entry sampling
    """
    rng = rng or np.random.default_rng(0)
    for param in params:
        if param.tensor.dtype != np.float64:
            raise ValueError(f"{param.name} is {param.tensor.dtype}; build the model under float64_mode()")
        param.tensor.zero_grad()
    loss_fn().backward()

    errors = []
    for param in params:
        flat = param.tensor.data.reshape(-1)
        grad = param.tensor.grad.reshape(-1) if param.tensor.grad is not None else np.zeros_like(flat)
        if entries_per_param is None or entries_per_param >= flat.size:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(rng.choice(flat.size, size=entries_per_param, replace=False))
        numeric = np.zeros(picks.size)
        for out_idx, idx in enumerate(picks):
            original = flat[idx]
            flat[idx] = original + step
            plus = float(loss_fn().data)
            flat[idx] = original - step
            minus = float(loss_fn().data)
            flat[idx] = original
            numeric[out_idx] = (plus - minus) / (2.0 * step)
        err = relative_error(grad[picks], numeric)
        if err >= tolerance:
            logger.warning(f"grad_check {param.name}: relative error {err:.3e}")
        errors.append(err)

    return GradCheckReport(max(errors) if errors else 0.0, tolerance, errors)
