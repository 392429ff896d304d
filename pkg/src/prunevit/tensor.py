"""Dense tensors with a define-by-run gradient tape.

Tensors wrap a contiguous numpy array (float32 by default). Operations in
:mod:`prunevit.ops` record backward closures on the active :class:`Tape`;
calling :meth:`Tape.backward` replays them in reverse and populates ``.grad``
on every leaf that requires gradients. A tape is rebuilt per forward pass, so
graph topology may change freely between passes.
"""

from __future__ import annotations

import numpy as np


class NumericsError(ValueError):
    """Raised on shape mismatches, non-finite values, or bad tape usage."""


_ACTIVE_TAPES: list["Tape"] = []


def active_tape():
    """The innermost open tape, or None when recording is off."""
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """n-d array of reals, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Entries are appended in execution order, which is a valid topological
    order of the graph, so the reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._entries = []  # (out_id, inputs, backward_fn)
        self._output_ids = set()

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, out: Tensor, inputs, backward_fn):
        """backward_fn(grad_out) -> per-input gradient arrays (None to skip)."""
        self._entries.append((id(out), inputs, backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss: Tensor):
        """Accumulate gradients of ``loss`` into every requires_grad leaf.

        The loss must be a scalar recorded on this tape. The tape is cleared
        afterwards and cannot be replayed.
        """
        if loss.data.size != 1:
            raise NumericsError(f"backward on non-scalar loss of shape {loss.data.shape}")
        if id(loss) not in self._output_ids and self._entries:
            raise NumericsError("loss was not recorded on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out_id, inputs, backward_fn in reversed(self._entries):
            g_out = grads.pop(out_id, None)
            if g_out is None:
                continue
            in_grads = backward_fn(g_out)
            for inp, g_in in zip(inputs, in_grads):
                if g_in is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                if key not in self._output_ids:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = np.ascontiguousarray(grads[key], dtype=leaf.data.dtype)
        if loss.requires_grad and id(loss) not in self._output_ids:
            loss.grad = np.ones_like(loss.data)
        self._entries.clear()
        self._output_ids.clear()


def check_finite(arr: np.ndarray, op_name: str) -> np.ndarray:
    # Fast path: a finite sum proves all entries finite; an overflowing but
    # all-finite array fails the sum check and passes the exact one.
    with np.errstate(over="ignore"):
        ok = np.isfinite(arr.sum())
    if not ok and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op_name} produced non-finite values")
    return arr


def result_tensor(arr: np.ndarray, op_name: str, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    check_finite(arr, op_name)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(arr)
    out.grad = None
    tape = active_tape()
    needs = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out.requires_grad = needs
    if needs:
        tape.record(out, inputs, backward_fn)
    return out
