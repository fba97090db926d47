"""Reverse-mode differentiation tape.

Ops record entries onto the innermost active tape (``with Tape() as t:``).
Each entry holds the op kind, input/output tensor ids and a closure that
maps the output gradient to input-gradient accumulations.  backward()
walks the entries in reverse, freeing intermediate gradients as soon as
their producing entry has consumed them, so peak memory stays near the
largest single activation rather than the whole graph.

With no tape active, ops run in inference mode with zero recording cost.
"""
from __future__ import annotations

import numpy as np

from .volume import Scalar, Volume

_active: list["Tape"] = []


class TapeEntry:
    __slots__ = ("kind", "inputs", "output", "fn")

    def __init__(self, kind, inputs, output, fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.fn = fn


class Tape:
    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.watched: set[int] = set()
        self._outputs: set[int] = set()

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active.pop()
        assert popped is self
        return False

    def watch(self, t):
        """Request the gradient of a tensor/scalar to survive backward()."""
        self.watched.add(t.uid)

    def record(self, kind, inputs, output, fn):
        if output.uid in self._outputs:
            raise ValueError(f"tensor uid {output.uid} already produced by another entry")
        self._outputs.add(output.uid)
        for t in inputs:
            if getattr(t, "requires_grad", False):
                self.watched.add(t.uid)
        self.entries.append(TapeEntry(kind, [t.uid for t in inputs], output.uid, fn))


def active_tape():
    return _active[-1] if _active else None


def backward(tape: Tape, loss) -> dict:
    """Run the adjoint pass; returns {uid: gradient} for watched tensors.

    Gradients of intermediates are freed once consumed.  Gradient arrays
    handed to the accumulator with own=False are treated as borrowed and
    copied lazily on the first in-place accumulation.
    """
    if not isinstance(loss, Scalar):
        raise TypeError(f"loss must be a taped Scalar, got {type(loss).__name__}")
    if loss.uid not in tape._outputs:
        raise ValueError("loss was not produced by an operation recorded on this tape")
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"loss is not finite: {loss.value}")

    grads: dict[int, object] = {loss.uid: 1.0}
    borrowed: set[int] = set()

    def acc(uid, g, own=True):
        if uid not in grads:
            grads[uid] = g
            if not own and isinstance(g, np.ndarray):
                borrowed.add(uid)
            return
        cur = grads[uid]
        if isinstance(cur, np.ndarray):
            if uid in borrowed:
                grads[uid] = cur + g
                borrowed.discard(uid)
            else:
                cur += g
        else:
            grads[uid] = cur + g

    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        borrowed.discard(entry.output)
        # An input needs a gradient if it is itself produced on the tape
        # (its adjoint will flow further back) or explicitly watched.
        need = tuple(u in tape._outputs or u in tape.watched for u in entry.inputs)
        if any(need):
            entry.fn(g, acc, need)
        if entry.output in tape.watched:
            grads[entry.output] = g

    return {uid: g for uid, g in grads.items() if uid in tape.watched}


def grad_of(grads: dict, t):
    """Fetch the gradient of a Volume/Scalar from a backward() result.

    Returns a zeros array (or 0.0) when the tensor never influenced the loss.
    """
    g = grads.get(t.uid)
    if g is not None:
        return g
    if isinstance(t, Volume):
        return np.zeros_like(t.data)
    return 0.0
