"""Dense N-dimensional tensors and a reverse-mode autodiff tape.

A :class:`Tensor` wraps a contiguous numpy array laid out (batch, channels,
spatial...). Differentiable operations record :class:`TapeNode` entries on the
currently active :class:`Tape`; :func:`backward` replays the tape in reverse
and accumulates gradients onto every ``requires_grad`` leaf. A tape is valid
for exactly one backward pass and is discarded afterwards.

Training runs in float32 by default; gradient checks must run in float64
(finite differences are unreliable in single precision), which
:func:`finite_difference_check` enforces.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import ShapeError

_DEFAULT_DTYPE = np.float32
_TAPE_STACK: list["Tape"] = []
_DEBUG_CHECKS = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("supported dtypes are float32 and float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every recorded op asserts its output is finite."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Dense array plus gradient bookkeeping.

    ``grad`` is populated (same shape as ``data``) only for requires_grad
    leaves, and only after :func:`backward` ran over a tape that used the
    tensor. Repeated backward passes accumulate into ``grad`` by summation;
    the optimizer clears it after each update.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray
        # would promote them to shape (1,)).
        self.data = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return (f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class TapeNode:
    """One executed operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "name")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                 name: str = ""):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of one forward pass. Use as a context manager."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._by_output: dict[int, TapeNode] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._by_output[id(node.output)] = node

    def produces(self, t: Tensor) -> bool:
        return id(t) in self._by_output


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(op: str, inputs: Sequence[Tensor], output: Tensor,
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
              name: str = "") -> Tensor:
    """Register an executed op on the active tape, if any.

    The output's requires_grad is the OR of the inputs'; nothing is recorded
    when no tape is active or no input can need gradients.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(output.data)):
        raise FloatingPointError(f"non-finite values in output of {name or op}")
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    if tape is not None and needs:
        output.requires_grad = True
        tape.record(TapeNode(op, tuple(inputs), output, backward_fn, name))
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients of tensors used more than once accumulate by summation. The
    tape is single-use: a second call on the same tape raises.
    """
    if tape.consumed:
        raise RuntimeError("this tape was already consumed by a backward pass")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produces(loss):
        raise ValueError("loss is not produced by this tape (detached or wrong tape)")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        input_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            tensors[key] = t
            if key in grads:
                grads[key] += g
            else:
                grads[key] = g.astype(t.data.dtype, copy=False)
    for key, g in grads.items():
        t = tensors[key]
        if tape.produces(t) or not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad += g


def tensor_create(shape, fill: str = "zeros", *, value: float = 0.0,
                  mean: float = 0.0, std: float = 1.0, seed: int = 0,
                  dtype=None, requires_grad: bool = False) -> Tensor:
    """Create a tensor filled with zeros, a constant, or seeded gaussians.

    The gaussian fill is a pure function of (seed, shape): see :mod:`rng`.
    """
    shape = tuple(int(s) for s in np.atleast_1d(np.asarray(shape, dtype=np.int64)))
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    dtype = dtype if dtype is not None else _DEFAULT_DTYPE
    n = int(np.prod(shape))
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "gaussian":
        if std < 0:
            raise ValueError("std must be >= 0")
        data = rng.gaussian(int(seed), n, mean, std).reshape(shape).astype(dtype)
    else:
        raise ValueError(f"unknown fill kind {fill!r}")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def finite_difference_check(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                            h: float = 1e-5) -> float:
    """Max relative error between tape gradients of f and central differences.

    Per coordinate i the error is
    ``|analytic_i - (f(x + h e_i) - f(x - h e_i)) / (2h)| / max(1, |analytic_i|)``.
    Requires float64 input; f must be evaluable at every perturbed point and
    is re-run outside any tape for the numeric side.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if x.dtype != np.float64:
        raise ValueError("finite differences need a float64 tensor")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = f(probe)
    if not isinstance(y, Tensor):
        raise TypeError("f must return a Tensor")
    backward(tape, y)
    analytic = probe.grad.reshape(-1) if probe.grad is not None else np.zeros(x.size)

    def eval_at(arr: np.ndarray) -> float:
        out = f(Tensor(arr, dtype=np.float64))
        return out.data.item()

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = eval_at(bumped.reshape(x.shape))
        bumped[i] = flat[i] - h
        f_minus = eval_at(bumped.reshape(x.shape))
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst


def first_nonfinite(tape: Tape) -> str | None:
    """Name of the first tape node whose output has NaN/Inf entries, if any."""
    for node in tape.nodes:
        if not np.all(np.isfinite(node.output.data)):
            return node.name or node.op
    return None
