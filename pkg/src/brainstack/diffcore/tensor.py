"""Tensors, parameters and the recording tape behind reverse-mode differentiation."""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError
from .rng import make_rng

DTYPE = np.float64
FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_TAPE: contextvars.ContextVar[list | None] = contextvars.ContextVar("_TAPE", default=None)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("_GRAD_ENABLED", default=True)


def _as_float(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    return arr if arr.dtype in FLOAT_TYPES else arr.astype(DTYPE)


class Tensor:
    """A node of the computation graph.

    Leaves carry no backward function. Interior nodes keep references to
    their parents and a closure mapping the upstream gradient to one gradient
    per parent (``None`` for parents that need none).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "index", "extras")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
    ):
        self.data = _as_float(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.index = -1
        self.extras: dict | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    @property
    def name(self) -> str:
        return f"{self.op}#{self.index}" if self.index >= 0 else self.op

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar; the primitives live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self) -> list["Tensor"]:
        return backward(self)


class Parameter(Tensor):
    """A learnable leaf with its gradient and momentum buffer."""

    __slots__ = ("pid", "momentum")

    def __init__(self, pid: str, data, dtype=None):
        super().__init__(np.array(_as_float(data, dtype), copy=True), requires_grad=True, op="param")
        self.pid = pid
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.pid!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def recording() -> Iterator[list]:
    tape: list[Tensor] = []
    token = _TAPE.set(tape)
    try:
        yield tape
    finally:
        _TAPE.reset(token)


def next_index() -> int:
    tape = _TAPE.get()
    return len(tape) if tape is not None else -1


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; the backward closure is kept only when some parent needs it."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    node = Tensor(data, requires_grad=needs, parents=tuple(parents) if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)
    tape = _TAPE.get()
    if tape is not None:
        node.index = len(tape)
        tape.append(node)
    return node


def shape_error(op: str, message: str) -> ShapeError:
    idx = next_index()
    return ShapeError(f"{op}#{idx}" if idx >= 0 else op, message)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, grad: np.ndarray | None = None) -> list[Tensor]:
    """Propagate d(output) back to every leaf that requires a gradient.

    Gradients accumulate into ``leaf.grad``. Returns the leaves reached, in a
    deterministic order.
    """
    if grad is None:
        if output.data.size != 1:
            raise ShapeError(output.name, f"backward needs a scalar output, got shape {output.shape}")
        grad = np.ones_like(output.data)
    if not output.requires_grad:
        return []
    grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.data.dtype)}
    reached: list[Tensor] = []
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            reached.append(node)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return reached


class Context:
    """Per-evaluation state: train/eval mode and the dropout stream."""

    def __init__(self, mode: str = "eval", seed: int | Sequence[int] = 0):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.seed = seed
        self._rng: np.random.Generator | None = None

    @property
    def training(self) -> bool:
        return self.mode == "train"

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = make_rng(self.seed, "dropout")
        return self._rng


class Graph:
    """A traced computation over named inputs.

    ``fn(ctx, **inputs)`` builds the graph from primitives; it returns a
    Tensor or a dict of named Tensors. Each :meth:`evaluate` records the node
    list in execution order (``self.nodes``), which is a valid topological
    order.
    """

    def __init__(self, fn: Callable[..., Tensor | dict[str, Tensor]], params: Iterable[Parameter] = ()):
        self.fn = fn
        self.params = list(params)
        self.nodes: list[Tensor] = []
        self._outputs: dict[str, Tensor] | None = None

    def evaluate(self, inputs: dict | None = None, mode: str = "eval", seed=0) -> dict[str, Tensor]:
        ctx = Context(mode, seed)
        wrapped = {k: as_tensor(v) for k, v in (inputs or {}).items()}
        self._outputs = None
        with recording() as tape:
            out = self.fn(ctx, **wrapped)
        self.nodes = tape
        outputs = out if isinstance(out, dict) else {"out": out}
        for name, t in outputs.items():
            if not np.all(np.isfinite(t.data)):
                culprit = next((n for n in tape if not np.all(np.isfinite(n.data))), t)
                raise NumericError(culprit.name, f"non-finite values in output {name!r}")
        self._outputs = outputs
        return outputs

    def backward(self, output: str = "out") -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise StateError("backward called before a successful evaluate")
        if output not in self._outputs:
            raise KeyError(output)
        for p in self.params:
            p.zero_grad()
        backward(self._outputs[output])
        return {p.pid: p.grad for p in self.params}
