"""Dense float tensors recorded on a define-by-run tape.

Every differentiable op appends ``(output, inputs, backward_fn)`` to the
innermost active :class:`Tape`.  :func:`backward` replays that list in
reverse and accumulates gradients into leaf tensors.  Ops executed while no
tape is active are not recorded, which doubles as an inference mode.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import InvalidShape, ShapeError, TapeError

_default_dtype: type = np.float32
_active_tapes: list["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision (used for gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


class Tape:
    """Ordered record of the differentiable ops executed while it is active."""

    def __init__(self) -> None:
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer; op outputs get theirs filled in by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape: Tape | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, tape: Tape | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = tape is not None
        out.grad = None
        out._tape = tape
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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its Adam moment buffers.

    ``init`` names the scheme :meth:`Module.initialize` uses to fill it.
    """

    __slots__ = ("name", "adam_m", "adam_v", "step_count", "init", "init_std")

    def __init__(self, shape, init: str = "xavier_uniform", std: float | None = None,
                 name: str = "") -> None:
        shape = tuple(int(s) for s in shape)
        if not shape or any(s < 1 for s in shape):
            raise InvalidShape(f"parameter shape must be nonempty and positive, got {shape}")
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = name
        self.init = init
        self.init_std = std
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, appending it to the active tape when any input needs grad."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._from_op(out_data, tape)
        tape.entries.append((out, inputs, backward_fn))
        return out
    return Tensor._from_op(out_data, None)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto whatever the leaves already hold; callers zero them
    between optimisation steps.  The tape is consumed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad += gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi
    tape.entries.clear()
    tape.consumed = True
