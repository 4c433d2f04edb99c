"""Differentiable operations on :class:`Tensor`.

Broadcasting is restricted to trailing dimensions: the second operand's shape must equal the
last ``ndim`` entries of the first operand's shape.
"""

from dataclasses import dataclass, field

import numpy as np

from kpconvx.errors import ContractError, DimensionError, EmptyBatchError
from kpconvx.tensorcore.counters import record
from kpconvx.tensorcore.tensor import Function, Tensor, get_default_dtype


def as_tensor(value: "Tensor | float | np.ndarray") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_trailing(a: np.ndarray, b: np.ndarray) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise DimensionError("Operands are not trailing-broadcast compatible", a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
        self.a, self.b = a, b
        record("matmul", a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Add(Function):
    def forward(self, a, b):
        _check_trailing(a, b)
        self.shape_b = b.shape
        if b.shape != a.shape:
            record("bias_add", a.size)
        return a + b

    def backward(self, grad):
        return grad, _reduce_to(grad, self.shape_b)


class Mul(Function):
    def forward(self, a, b):
        _check_trailing(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, _reduce_to(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class LeakyReLU(Function):
    def forward(self, a, slope: float):
        self.positive = a > 0
        self.slope = slope
        return np.where(self.positive, a, a * slope)

    def backward(self, grad):
        return (np.where(self.positive, grad, grad * self.slope),)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so that exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class RowScale(Function):
    """Multiply every row by its own constant factor."""

    def forward(self, a, factors: np.ndarray):
        if factors.shape != (a.shape[0],):
            raise DimensionError("row_scale needs one factor per row", a.shape, factors.shape)
        self.factors = factors.reshape((-1,) + (1,) * (a.ndim - 1)).astype(a.dtype)
        return a * self.factors

    def backward(self, grad):
        return (grad * self.factors,)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad / np.prod(self.shape), dtype=grad.dtype),)


class Reshape(Function):
    def forward(self, a, shape: tuple[int, ...]):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class ConcatColumns(Function):
    def forward(self, *arrays):
        rows = {a.shape[0] for a in arrays}
        if len(rows) != 1 or any(a.ndim != 2 for a in arrays):
            raise DimensionError("concat needs 2D operands with equal row counts", *(a.shape for a in arrays))
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


class RowGather(Function):
    """``out[i] = a[index[i]]``; an index equal to ``len(a)`` yields a zero row."""

    def forward(self, a, index: np.ndarray):
        n = a.shape[0]
        if index.size and (index.min() < 0 or index.max() > n):
            raise ContractError(f"Gather index out of range [0, {n}]")
        self.n, self.index = n, index
        padded = np.concatenate([a, np.zeros((1,) + a.shape[1:], dtype=a.dtype)], axis=0)
        return padded[index]

    def backward(self, grad):
        out = np.zeros((self.n + 1,) + grad.shape[self.index.ndim :], dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out[: self.n],)


class SegmentMean(Function):
    """Average of consecutive row blocks given by ``lengths``."""

    def forward(self, a, lengths: np.ndarray):
        if np.any(lengths <= 0):
            raise EmptyBatchError("segment_mean needs every segment to hold at least one row")
        self.lengths = lengths
        self.starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return np.add.reduceat(a, self.starts, axis=0) / lengths[:, None]

    def backward(self, grad):
        return (np.repeat(grad / self.lengths[:, None], self.lengths, axis=0),)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=1, keepdims=True),)


@dataclass
class BNState:
    """Learnable scale/shift plus running statistics of one batch-norm layer."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-6
    name: str = ""
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-6, name: str = "") -> "BNState":
        from kpconvx.tensorcore.tensor import Parameter

        dtype = get_default_dtype()
        return cls(
            scale=Parameter(np.ones(channels, dtype=dtype), name=f"{name}.scale"),
            shift=Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.shift"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
            name=name,
        )


class BatchNorm(Function):
    def forward(self, x, scale, shift, state: BNState, training: bool):
        if x.shape[0] == 0:
            raise EmptyBatchError("batch_norm received an empty batch")
        if x.ndim != 2 or x.shape[1] != scale.shape[0]:
            raise DimensionError("batch_norm channel mismatch", x.shape, scale.shape)
        self.training = training
        self.scale = scale
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            state.running_mean[:] = (1 - state.momentum) * state.running_mean + state.momentum * mean
            state.running_var[:] = (1 - state.momentum) * state.running_var + state.momentum * unbiased
            state.num_batches += 1
        else:
            mean, var = state.running_mean, state.running_var
        self.inv_std = 1.0 / np.sqrt(var + state.eps)
        self.xhat = (x - mean) * self.inv_std
        return self.xhat * scale + shift

    def backward(self, grad):
        dscale = (grad * self.xhat).sum(axis=0)
        dshift = grad.sum(axis=0)
        dxhat = grad * self.scale
        if not self.training:
            return dxhat * self.inv_std, dscale, dshift
        n = grad.shape[0]
        dx = (self.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - self.xhat * (dxhat * self.xhat).sum(axis=0))
        return dx, dscale, dshift


# Functional API


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: "Tensor | float") -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Tensor, b: "Tensor | float") -> Tensor:
    return Add.apply(as_tensor(a), scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: "Tensor | float") -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    return LeakyReLU.apply(a, slope=slope)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def elementwise(op: str, *inputs: Tensor, slope: float = 0.1) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``leaky_relu`` or ``sigmoid``."""
    if op == "add":
        return add(*inputs)
    if op == "mul":
        return mul(*inputs)
    if op == "leaky_relu":
        return leaky_relu(inputs[0], slope)
    if op == "sigmoid":
        return sigmoid(inputs[0])
    raise ContractError(f"Unknown elementwise op '{op}'")


def row_scale(a: Tensor, factors: np.ndarray) -> Tensor:
    return RowScale.apply(a, factors=np.asarray(factors))


def sum_all(a: Tensor) -> Tensor:
    return Sum.apply(a)


def mean_all(a: Tensor) -> Tensor:
    return Mean.apply(a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def concat_columns(*tensors: Tensor) -> Tensor:
    return ConcatColumns.apply(*tensors)


def row_gather(a: Tensor, index: np.ndarray) -> Tensor:
    return RowGather.apply(a, index=np.asarray(index, dtype=np.int64))


def segment_mean(a: Tensor, lengths: np.ndarray) -> Tensor:
    return SegmentMean.apply(a, lengths=np.asarray(lengths, dtype=np.int64))


def log_softmax(a: Tensor) -> Tensor:
    return LogSoftmax.apply(a)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of raw logits (inference only)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_norm(x: Tensor, state: BNState, training: bool) -> Tensor:
    return BatchNorm.apply(x, state.scale, state.shift, state=state, training=training)
