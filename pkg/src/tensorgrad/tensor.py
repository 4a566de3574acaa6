from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, final, override

import numpy as np

from src.errors import GraphConsumedError, ShapeMismatchError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Sequence

    from numpy.typing import ArrayLike, DTypeLike, NDArray

type Array = NDArray[np.floating[Any]]
type BackwardFn = Callable[[Array], Sequence[Array | None]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread, e.g. for teacher and evaluation forwards."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@final
class Tensor:
    """A dense numpy array that records the operations producing it.

    Attributes:
        data (Array): The values.
        grad (Array | None): Gradient accumulated by `backward`, same shape as `data`. Only leaves keep it.
        requires_grad (bool): Whether gradients flow into this tensor.
    """

    data: Array
    grad: Array | None
    requires_grad: bool

    __slots__ = ("_backward", "_op", "_parents", "_released", "data", "grad", "requires_grad")

    def __init__(  # noqa: D107
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: DTypeLike | None = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""
        self._released = False

    @classmethod
    def from_op(cls, data: Array, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        """Wrap an operator's result, recording the graph edge when any parent needs gradients."""
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents and not self._released

    @override
    def __repr__(self) -> str:
        suffix = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{suffix})"

    def item(self) -> float:
        if self.data.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.shape}"
            raise ShapeMismatchError(msg)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        from src.tensorgrad.ops import add  # noqa: PLC0415

        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from src.tensorgrad.ops import mul  # noqa: PLC0415

        return mul(self, other)

    def _release(self) -> None:
        self._parents = ()
        self._backward = None
        self._released = True

    def _topological_order(self) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)  # noqa: SLF001
        return order

    def backward(self, grad: ArrayLike | None = None, *, retain_graph: bool = False) -> None:
        """Accumulate the gradient of this tensor into every leaf that requires it.

        Args:
            grad (ArrayLike | None): Upstream gradient. Defaults to 1 for a single-element tensor.
            retain_graph (bool): Keep the recorded graph so `backward` can be called again.

        Raises:
            GraphConsumedError: If the graph was released by an earlier call.
            ShapeMismatchError: If no upstream gradient is given for a non-scalar tensor.
        """
        if self._released:
            msg = "The recorded graph was already released by an earlier backward() call"
            raise GraphConsumedError(msg)
        if grad is None and self.data.size != 1:
            msg = f"backward() needs an upstream gradient for a tensor of shape {self.shape}"
            raise ShapeMismatchError(msg)

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        order = self._topological_order()
        pending: dict[int, Array] = {id(self): seed}

        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            if node._backward is None:  # noqa: SLF001
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad), strict=True):  # noqa: SLF001
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

        if not retain_graph:
            for node in order:
                if not node.is_leaf:
                    node._release()  # noqa: SLF001


@dataclass(frozen=True, slots=True)
class Parameter:
    """A named trainable tensor. `decay` marks conv/linear weights, the only tensors with weight decay."""

    name: str
    tensor: Tensor
    decay: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def parameter(name: str, data: Array, *, decay: bool = True) -> Parameter:
    return Parameter(name=name, tensor=Tensor(data, requires_grad=True), decay=decay)


def check_unique_names(params: Sequence[Parameter]) -> None:
    """Check that parameter names are unique within a model.

    Raises:
        ValueError: If two parameters share a name.
    """
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            msg = f"Duplicate parameter name {p.name!r}"
            raise ValueError(msg)
        seen.add(p.name)
