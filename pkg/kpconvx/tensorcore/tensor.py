import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from kpconvx.errors import ContractError, DimensionError
from kpconvx.models.config import settings

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()
_sequence = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    """Floating dtype used when a tensor is built without an explicit one."""
    name = getattr(_state, "dtype", settings.precision)
    return np.dtype(_DTYPES[name])


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"Unsupported precision '{name}', expected one of {sorted(_DTYPES)}")
    _state.dtype = name


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    """Temporarily switch the default precision (gradient checks run in float64)."""
    previous = getattr(_state, "dtype", None)
    set_default_dtype(name)
    try:
        yield
    finally:
        if previous is None:
            del _state.dtype
        else:
            _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense n-dimensional array taking part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(
        self,
        values: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | type | None = None,
    ):
        if isinstance(values, Tensor):
            values = values.values
        self.values: np.ndarray = np.asarray(values, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.dtype)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.values.shape:
            raise DimensionError("Gradient shape does not match tensor shape", grad.shape, self.values.shape)
        self.grad = grad.astype(self.dtype, copy=True) if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    # Operators delegate to the functional API
    def __add__(self, other: "Tensor | float") -> "Tensor":
        from kpconvx.tensorcore import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        from kpconvx.tensorcore import ops

        return ops.sub(self, other)

    def __neg__(self) -> "Tensor":
        from kpconvx.tensorcore import ops

        return ops.scale(self, -1.0)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        from kpconvx.tensorcore import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from kpconvx.tensorcore import ops

        return ops.matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


class Parameter(Tensor):
    """Named leaf tensor that always requires a gradient."""

    def __init__(self, values: Any, name: str | None = None, dtype: np.dtype | type | None = None):
        super().__init__(values, requires_grad=True, name=name, dtype=dtype)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning one gradient per
    input tensor (``None`` where an input receives no gradient). Arrays needed by ``backward``
    are saved on the instance during ``forward``.
    """

    def __init__(self, *tensors: Tensor):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        function = cls(*tensors)
        out = function.forward(*(t.values for t in tensors), **kwargs)
        requires_grad = _grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad, dtype=out.dtype)
        if requires_grad:
            result._node = Node(function=function, inputs=tensors, output_id=id(result), seq=next(_sequence))
        return result


@dataclass(eq=False)
class Node:
    """One recorded operation: the function, its inputs and its position in forward order."""

    function: Function
    inputs: tuple[Tensor, ...]
    output_id: int
    seq: int


@dataclass
class ComputeGraph:
    """Operations reachable from a root tensor, in the order they were recorded."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            tensor = stack.pop()
            node = tensor._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(t for t in node.inputs if t.requires_grad)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def backward(self, root: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(node.output_id, None)
            if grad is None:
                continue
            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.accumulate_grad(input_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + input_grad
                else:
                    pending[id(tensor)] = input_grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires one."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that does not require gradients")
    if loss.is_leaf:
        loss.accumulate_grad(np.ones_like(loss.values))
        return
    graph = ComputeGraph.trace(loss)
    logger.debug("Backward through %d recorded operations", len(graph.nodes))
    graph.backward(loss, np.ones_like(loss.values))
