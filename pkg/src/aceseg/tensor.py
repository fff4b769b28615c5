"""Dense NCHW tensors and the reverse-mode differentiation tape.

Every value flowing through the network is a 4-d N x C x H x W array.
Operations built on top of `record` register a node on the currently
active tape; `backward` replays the tape in reverse and accumulates
gradients into the leaf tensors.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense N x C x H x W array with an optional gradient buffer.

    Tensors are immutable once produced by an op; gradients accumulate
    additively into `grad` until `zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are NCHW; got {arr.ndim} dimension(s)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def cast_(self, dtype) -> "Tensor":
        """Cast storage in place (used to run whole models at float64)."""
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def scalar(value: float, dtype=np.float32) -> Tensor:
    """A 1x1x1x1 tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


class Node:
    """One recorded operation: inputs, output, and a backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: tuple, output: Tensor, backward_fn: Callable):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list[Optional["Tape"]] = []


class Tape:
    """Ordered record of operations, usable as a context manager.

    Nodes are appended in execution order, which is already a valid
    topological order for the reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


class no_grad:
    """Context manager that suppresses recording on any enclosing tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(name: str, inputs: Sequence, out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap op output in a Tensor and register the node if a tape is live.

    `backward_fn` receives the output gradient and must return one gradient
    array (or None) per entry of `inputs`.
    """
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    needs_grad = any(t.requires_grad for t in tensor_inputs)
    tape = active_tape()
    out = Tensor(out_data, requires_grad=needs_grad and tape is not None)
    if tape is not None and needs_grad:
        tape.record(Node(name, tensor_inputs, out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate `grad` on every participating leaf with d(loss)/d(leaf).

    Gradients add into existing buffers, so running backward twice without
    zeroing doubles them. Intermediate gradients live only for the sweep.
    """
    if loss.shape != (1, 1, 1, 1):
        raise TapeError(f"loss must be a 1x1x1x1 scalar tensor, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced by an op recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        if len(in_grads) != len(node.inputs):
            raise TapeError(f"op '{node.name}' returned {len(in_grads)} gradients "
                            f"for {len(node.inputs)} inputs")
        for inp, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            if g.shape != inp.data.shape:
                raise TapeError(f"op '{node.name}' produced gradient of shape {g.shape} "
                                f"for input of shape {inp.data.shape}")
            if tape.produced(inp):
                acc = grads.get(id(inp))
                grads[id(inp)] = g.copy() if acc is None else acc + g
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = g.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad = inp.grad + g.astype(inp.data.dtype, copy=False)
