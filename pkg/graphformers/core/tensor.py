"""
Dense tensor with a reverse-mode differentiation tape.

Every differentiable kernel in ``graphformers.core.ops`` produces its result
through ``Tensor._from_op`` which records a ``TapeNode``; ``backward`` replays
the recorded graph in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from graphformers.errors import ContractError, NonFiniteError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DTYPES: Dict[str, Any] = {"float64": np.float64, "float32": np.float32}
_state = threading.local()


def _get(name: str, default: Any) -> Any:
    return getattr(_state, name, default)


def set_default_dtype(name: str) -> None:
    """Select 64-bit (default) or 32-bit storage for newly created tensors."""
    if name not in _DTYPES:
        raise ContractError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    _state.dtype = _DTYPES[name]


def get_default_dtype() -> Any:
    return _get("dtype", np.float64)


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run kernels without recording a tape (inference, finite differences)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class FlopCounter:
    """Multiply-add style operation counts gathered inside ``count_flops``."""

    total: int = 0
    by_op: Dict[str, int] = field(default_factory=dict)

    def add(self, op: str, flops: int) -> None:
        self.total += flops
        self.by_op[op] = self.by_op.get(op, 0) + flops


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    stack: List[FlopCounter] = _get("flop_stack", [])
    _state.flop_stack = stack + [counter]
    try:
        yield counter
    finally:
        _state.flop_stack = stack


def record_flops(op: str, flops: int) -> None:
    for counter in _get("flop_stack", ()):
        counter.add(op, int(flops))


@dataclass
class TapeNode:
    """One recorded kernel application."""

    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn
    saved: Dict[str, Any] = field(default_factory=dict)


class Tensor:
    """
    Dense row-major array participating in a differentiation graph.

    Tensors are treated as immutable once produced by a kernel. Only leaf
    tensors (parameters) are updated in place, through ``assign_``/``add_``,
    which bump ``version`` so content-hash consumers can notice.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ):
        array = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"tensor {name or ''} created with non-finite values")
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.version = 0

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        inputs: Sequence["Tensor"],
        op: str,
        backward_fn: BackwardFn,
        saved: Optional[Dict[str, Any]] = None,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.name = None
        out.grad = None
        out.version = 0
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.node = TapeNode(op, tuple(inputs), backward_fn, saved or {}) if out.requires_grad else None
        return out

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> Any:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # --- leaf mutation -------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign_(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ContractError(f"assign_ shape {value.shape} != {self.data.shape}")
        self.data[...] = value
        self.version += 1

    def add_(self, delta: np.ndarray) -> None:
        self.data += delta
        self.version += 1

    def bump_version(self) -> None:
        self.version += 1

    def backward(self) -> None:
        backward(self)

    # --- operator sugar --------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        from graphformers.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from graphformers.core import ops
        return ops.sub(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        from graphformers.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from graphformers.core import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from graphformers.core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from graphformers.core import ops
        return ops.getitem(self, index)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """
    Accumulate d(root)/d(leaf) into ``grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that the root does not depend on receive a
    zero gradient. Repeated calls without ``zero_grad`` accumulate.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.zero_grad()
    if not root.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for tensor in reversed(_topological_order(root)):
        upstream = grads.pop(id(tensor), None)
        if upstream is None:
            continue
        if tensor.node is None:
            if tensor.grad is None:
                tensor.zero_grad()
            tensor.grad += upstream
            continue
        parent_grads = tensor.node.backward_fn(upstream)
        for parent, g in zip(tensor.node.inputs, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
