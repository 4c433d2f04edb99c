"""Central finite-difference checks for recorded gradients."""

import logging
from typing import Callable, Sequence

import numpy as np

from kpconvx.tensorcore.ops import mul, sum_all
from kpconvx.tensorcore.tensor import Tensor, backward, default_dtype

logger = logging.getLogger(__name__)


def projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar loss ``sum(out * R)`` with a fixed random ``R``; exercises every output entry."""
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_all(mul(out, Tensor(weights, dtype=out.dtype)))


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = loss_fn().item()
        flat[i] = original - step
        minus = loss_fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5) -> float:
    """
    Compare recorded gradients with central differences.

    ``loss_fn`` must rebuild the graph from ``tensors`` on each call. Runs in float64 and returns
    the worst relative error over all entries of all tensors.
    """
    with default_dtype("float64"):
        for tensor in tensors:
            tensor.zero_grad()
        backward(loss_fn())
        worst = 0.0
        for tensor in tensors:
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
            numeric = numerical_gradient(loss_fn, tensor, step)
            error = max_relative_error(analytic, numeric)
            logger.debug("gradcheck %s: max relative error %.3e", tensor.name or tensor.shape, error)
            worst = max(worst, error)
    return worst
