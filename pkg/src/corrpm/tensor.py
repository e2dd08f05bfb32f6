"""Tensor values, parameter storage, MAC counting and reverse-mode backward.

A :class:`Tensor` wraps a float64 numpy array. Every differentiable op in
:mod:`corrpm.ops` produces a new tensor that remembers its parents and a
closure mapping the output gradient to parent gradients, so a forward pass
builds its own tape. :func:`backward` walks that tape in reverse
topological order and deposits gradients into a :class:`ParamStore`.
"""

from __future__ import annotations

import contextvars
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense real array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Build an op output. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from corrpm import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from corrpm import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from corrpm import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from corrpm import ops
        return ops.add(self, ops.mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        from corrpm import ops
        return ops.add(ops.mul(self, -1.0), other)

    def sum(self):
        from corrpm import ops
        return ops.sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ParamStore:
    """Named trainable tensors, each paired with one gradient buffer.

    Names are stable dotted paths (``backbone.stage1.conv1.weight``).
    Parameter tensors are replaced, not mutated, when their values change.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        self._grads[name] = np.zeros_like(t.data)
        return t

    def set(self, name: str, value) -> Tensor:
        old = self._params[name]
        value = np.array(value, dtype=DTYPE)
        if value.shape != old.shape:
            raise ShapeError(f"{name}: new value shape {value.shape} != {old.shape}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out


_ACTIVE_COUNTER: contextvars.ContextVar["OpCounter | None"] = contextvars.ContextVar(
    "corrpm_op_counter", default=None
)


class OpCounter:
    """Multiply-accumulate tally for conv and matmul ops.

    Used as a context manager; ops executed inside the block add to it::

        with OpCounter() as counter:
            model_forward(...)
        counter.total
    """

    def __init__(self):
        self.breakdown: Counter[str] = Counter()
        self.calls: Counter[str] = Counter()
        self._token = None

    @property
    def total(self) -> int:
        return sum(self.breakdown.values())

    def add(self, op: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC count must be non-negative")
        self.breakdown[op] += int(macs)
        self.calls[op] += 1

    def __enter__(self) -> "OpCounter":
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_COUNTER.reset(self._token)
        self._token = None


def count_macs(op: str, macs: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(op, macs)


_ACTIVE_PATTERN: contextvars.ContextVar["ActivationPattern | None"] = contextvars.ContextVar(
    "corrpm_activation_pattern", default=None
)


class ActivationPattern:
    """Records which side of the kink every piecewise-linear unit landed on.

    Two evaluations with equal patterns lie in the same linear piece, so a
    finite difference between them sees no kink.
    """

    def __init__(self):
        self.masks: list[bytes] = []
        self._token = None

    def record(self, mask: np.ndarray) -> None:
        self.masks.append(np.packbits(mask, axis=None).tobytes())

    def __eq__(self, other) -> bool:
        return isinstance(other, ActivationPattern) and self.masks == other.masks

    def __enter__(self) -> "ActivationPattern":
        self._token = _ACTIVE_PATTERN.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_PATTERN.reset(self._token)
        self._token = None


def record_activation(mask: np.ndarray) -> None:
    pattern = _ACTIVE_PATTERN.get()
    if pattern is not None:
        pattern.record(mask)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into ``params``' gradient buffers.

    Parameters that the loss does not depend on keep their current (zero)
    gradient. ``loss`` must be a single-element tensor produced by a
    recorded computation.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise RuntimeError("backward called on a tensor with no recorded computation")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"internal: gradient shape {pg.shape} != parent shape {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for name, t in params.items():
        g = leaves.get(id(t))
        if g is not None:
            params.grad(name)[...] += g
