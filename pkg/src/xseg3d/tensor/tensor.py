"""Tensor values and the reverse-mode tape.

A :class:`Tape` is activated with ``with Tape() as tape:``; ops executed inside
the block whose inputs require gradients are appended to it. Outside any tape,
ops run as plain numpy computations and record nothing.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..errors import TapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "xseg3d_active_tape", default=None
)
_DEFAULT_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "xseg3d_default_dtype", default=np.dtype(np.float32)
)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from non-float data."""
    token = _DEFAULT_DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


class Tensor:
    """Dense real array, optionally tracked by the active tape.

    The wrapped array is marked read-only; ops always allocate new outputs.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad=False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # arithmetic sugar; implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    """One recorded op.

    ``parents`` holds a node id per op input, or None for inputs that are
    constants on this tape. ``inputs`` and ``out`` keep the forward values so
    custom backward rules (guided backprop, DeepLift) can inspect them.
    ``backward(g, needs)`` returns one gradient per input; entries whose
    ``needs`` flag is False may be None.
    """

    op: str
    parents: tuple[Optional[int], ...]
    inputs: tuple[np.ndarray, ...]
    out: Optional[np.ndarray]
    backward: Optional[Callable[[np.ndarray, tuple[bool, ...]], Sequence[Optional[np.ndarray]]]]
    attrs: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Append-only record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        """Node id of ``t`` on this tape, registering it as a leaf if needed."""
        if t.tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), (), t.data, None))
            self._leaf_ids[key] = nid
            self._leaf_refs.append(t)
        return nid

    def lookup(self, t: Tensor) -> Optional[int]:
        if t.tape is self:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def record(self, op, inputs: Sequence[Tensor], out: np.ndarray, backward, **attrs) -> Tensor:
        parents = tuple(self.node_of(t) for t in inputs)
        result = Tensor._wrap(out)
        if all(p is None for p in parents):
            return result
        nid = len(self.nodes)
        self.nodes.append(
            Node(op, parents, tuple(t.data for t in inputs), result.data, backward, attrs)
        )
        result.requires_grad = True
        result.node_id = nid
        result.tape = self
        return result


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_record():
    """Run ops without recording even if a tape is active."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


class Gradients:
    """Result of :func:`backward`: gradients indexed by tensor or node id."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self.tape = tape
        self.by_node = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        nid = self.tape.lookup(t)
        if nid is None:
            raise TapeError(f"{t!r} is not on this tape")
        g = self.by_node.get(nid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def get(self, t: Tensor, default=None):
        nid = self.tape.lookup(t)
        if nid is None or nid not in self.by_node:
            return default
        return self.by_node[nid]

    def __contains__(self, t: Tensor) -> bool:
        return self.tape.lookup(t) in self.by_node


Rule = Callable[[Node, np.ndarray], Optional[Sequence[Optional[np.ndarray]]]]


def backward(tape: Tape, root: Tensor, seed=None, rules: dict[str, Rule] | None = None) -> Gradients:
    """Propagate from ``root`` back through ``tape``.

    ``seed`` is the gradient placed on ``root``; required unless root holds a
    single element. ``rules`` maps op names to replacement local backward
    functions; a rule returning None falls back to the recorded one.
    """
    root_id = tape.lookup(root)
    if root_id is None:
        raise TapeError("root tensor is not recorded on this tape")
    if seed is None:
        if root.size != 1:
            raise TapeError(f"non-scalar root of shape {root.shape} needs an explicit seed")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise TapeError(f"seed shape {seed.shape} != root shape {root.shape}")
    grads: dict[int, np.ndarray] = {root_id: seed}
    nodes = tape.nodes
    for nid in range(root_id, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or node.backward is None:
            continue
        parent_grads = None
        if rules is not None and node.op in rules:
            parent_grads = rules[node.op](node, g)
        if parent_grads is None:
            parent_grads = node.backward(g, tuple(p is not None for p in node.parents))
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    return Gradients(tape, grads)


def grad(f: Callable[..., Tensor], *args: Tensor, seed=None) -> list[np.ndarray]:
    """Gradients of ``f(*args)`` with respect to each argument."""
    with Tape() as tape:
        out = f(*args)
    g = backward(tape, out, seed=seed)
    return [g[a] for a in args]
