"""Tape-based reverse-mode differentiation over dense float64 tensors.

The two network architectures in this package (the CTR base model and the
recurrent parameter generator) are fixed computation graphs, so the engine
supports exactly the primitives they need: matmul, add, sub, mul, concat,
gather, slice, reshape, sum, log, sigmoid, tanh, relu and clip.  Everything
runs in 64-bit floats; forward results and gradients are bitwise
reproducible for identical inputs because every primitive lowers to the
same deterministic numpy calls.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GradError",
    "ShapeMismatch",
    "Node",
    "Tape",
    "finite_diff_check",
]


class GradError(RuntimeError):
    """Misuse of the tape, e.g. backward before any forward was recorded."""


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for a primitive."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """Handle to one tensor recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape._values[self.index].shape

    def __repr__(self):  # pragma: no cover
        return f"Node(idx={self.index}, shape={self.shape})"


class _Record:
    __slots__ = ("op", "out", "inputs", "aux")

    def __init__(self, op: str, out: int, inputs: tuple[int, ...], aux):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.aux = aux


class Tape:
    """Ordered record of primitive applications.

    Ops execute eagerly as they are recorded (that is the forward pass);
    `backward` walks the records in exact reverse order accumulating
    vector-Jacobian products.  A tape is single-owner: never share one
    between concurrent forward/backward passes.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._records: list[_Record] = []
        self._leaves: list[int] = []

    # ------------------------------------------------------------------
    # tensor creation

    def leaf(self, value) -> Node:
        """Register a differentiation target."""
        node = self._new_node(_as_f64(value))
        self._leaves.append(node.index)
        return node

    def constant(self, value) -> Node:
        """Register a tensor that never receives gradient."""
        return self._new_node(_as_f64(value))

    def _new_node(self, value: np.ndarray) -> Node:
        self._values.append(value)
        return Node(self, len(self._values) - 1)

    def _record(self, op: str, value: np.ndarray, inputs: tuple[Node, ...], aux=None) -> Node:
        node = self._new_node(value)
        self._records.append(_Record(op, node.index, tuple(n.index for n in inputs), aux))
        return node

    # ------------------------------------------------------------------
    # primitives

    def add(self, a: Node, b: Node) -> Node:
        out = self._broadcast_op("add", a, b, np.add)
        return out

    def sub(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("sub", a, b, np.subtract)

    def mul(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("mul", a, b, np.multiply)

    def _broadcast_op(self, op, a, b, fn) -> Node:
        try:
            value = fn(a.value, b.value)
        except ValueError:
            raise ShapeMismatch(
                f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast"
            ) from None
        return self._record(op, value, (a, b))

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2:
            raise ShapeMismatch(
                f"matmul: operands must have ndim >= 2, got {av.shape} and {bv.shape}"
            )
        try:
            value = np.matmul(av, bv)
        except ValueError:
            raise ShapeMismatch(
                f"matmul: operand shapes {av.shape} and {bv.shape} not conformable"
            ) from None
        return self._record("matmul", value, (a, b))

    def concat(self, nodes: list[Node], axis: int = 0) -> Node:
        if not nodes:
            raise ShapeMismatch("concat: need at least one operand")
        try:
            value = np.concatenate([n.value for n in nodes], axis=axis)
        except ValueError:
            shapes = [n.shape for n in nodes]
            raise ShapeMismatch(f"concat: shapes {shapes} not concatenable on axis {axis}") from None
        sizes = [n.value.shape[axis] for n in nodes]
        return self._record("concat", value, tuple(nodes), (axis, sizes))

    def gather(self, x: Node, indices) -> Node:
        """Select rows of `x` (axis 0) by an integer index array."""
        idx = np.asarray(indices)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ShapeMismatch("gather: indices must be integers")
        if idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0]):
            raise ShapeMismatch(
                f"gather: index out of range for {x.value.shape[0]} rows "
                f"(got min {idx.min()}, max {idx.max()})"
            )
        value = x.value[idx]
        return self._record("gather", value, (x,), idx)

    def slice(self, x: Node, start: int, stop: int, axis: int = 0) -> Node:
        if not (0 <= start <= stop <= x.value.shape[axis]):
            raise ShapeMismatch(
                f"slice: range [{start}:{stop}] invalid for shape {x.shape} axis {axis}"
            )
        key = tuple(
            np.s_[start:stop] if d == axis else np.s_[:] for d in range(x.value.ndim)
        )
        return self._record("slice", x.value[key].copy(), (x,), (key,))

    def reshape(self, x: Node, shape) -> Node:
        try:
            value = x.value.reshape(shape)
        except ValueError:
            raise ShapeMismatch(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
        return self._record("reshape", value, (x,), x.value.shape)

    def sum(self, x: Node, axis=None, keepdims: bool = False) -> Node:
        value = x.value.sum(axis=axis, keepdims=keepdims)
        return self._record("sum", np.asarray(value), (x,), (axis, keepdims, x.value.shape))

    def log(self, x: Node) -> Node:
        return self._record("log", np.log(x.value), (x,))

    def sigmoid(self, x: Node) -> Node:
        # tanh form is overflow-safe for large |x|
        value = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
        return self._record("sigmoid", value, (x,))

    def tanh(self, x: Node) -> Node:
        return self._record("tanh", np.tanh(x.value), (x,))

    def relu(self, x: Node) -> Node:
        return self._record("relu", np.maximum(x.value, 0.0), (x,))

    def clip(self, x: Node, lo: float, hi: float) -> Node:
        return self._record("clip", np.clip(x.value, lo, hi), (x,), (lo, hi))

    # ------------------------------------------------------------------
    # execution

    def replay(self) -> None:
        """Re-execute every record in order from current leaf/constant values.

        Reproduces the recorded forward bitwise; used to validate tape
        integrity in tests.
        """
        for rec in self._records:
            vals = [self._values[i] for i in rec.inputs]
            self._values[rec.out] = self._reapply(rec, vals)

    def _reapply(self, rec: _Record, vals):
        op = rec.op
        if op == "add":
            return np.add(vals[0], vals[1])
        if op == "sub":
            return np.subtract(vals[0], vals[1])
        if op == "mul":
            return np.multiply(vals[0], vals[1])
        if op == "matmul":
            return np.matmul(vals[0], vals[1])
        if op == "concat":
            return np.concatenate(vals, axis=rec.aux[0])
        if op == "gather":
            return vals[0][rec.aux]
        if op == "slice":
            return vals[0][rec.aux[0]].copy()
        if op == "reshape":
            return vals[0].reshape(self._values[rec.out].shape)
        if op == "sum":
            axis, keepdims, _ = rec.aux
            return np.asarray(vals[0].sum(axis=axis, keepdims=keepdims))
        if op == "log":
            return np.log(vals[0])
        if op == "sigmoid":
            return 0.5 * (np.tanh(0.5 * vals[0]) + 1.0)
        if op == "tanh":
            return np.tanh(vals[0])
        if op == "relu":
            return np.maximum(vals[0], 0.0)
        if op == "clip":
            return np.clip(vals[0], rec.aux[0], rec.aux[1])
        raise GradError(f"unknown op {op!r}")  # pragma: no cover

    def backward(self, output: Node, seed=None) -> list[np.ndarray]:
        """Accumulate gradients of `output` into every leaf.

        Returns one gradient per leaf, in leaf creation order, each with the
        leaf's shape.  `seed` defaults to 1.0 for scalar outputs and must be
        given (with the output's shape) otherwise.
        """
        if not self._records:
            raise GradError("backward called before any forward op was recorded")
        out_val = self._values[output.index]
        if seed is None:
            if out_val.ndim != 0 and out_val.size != 1:
                raise GradError("backward on non-scalar output requires an explicit seed")
            seed_arr = np.ones_like(out_val)
        else:
            seed_arr = _as_f64(seed)
            if seed_arr.shape != out_val.shape:
                raise ShapeMismatch(
                    f"backward: seed shape {seed_arr.shape} != output shape {out_val.shape}"
                )
        adjoint: dict[int, np.ndarray] = {output.index: seed_arr}
        for rec in reversed(self._records):
            g = adjoint.pop(rec.out, None)
            if g is None:
                continue
            for idx, part in zip(rec.inputs, self._vjp(rec, g)):
                if part is None:
                    continue
                if idx in adjoint:
                    adjoint[idx] = adjoint[idx] + part
                else:
                    adjoint[idx] = part
        grads = []
        for idx in self._leaves:
            g = adjoint.get(idx)
            if g is None:
                g = np.zeros_like(self._values[idx])
            grads.append(g)
        return grads

    def _vjp(self, rec: _Record, g: np.ndarray):
        op = rec.op
        vals = [self._values[i] for i in rec.inputs]
        if op == "add":
            return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
        if op == "sub":
            return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
        if op == "mul":
            return (
                _unbroadcast(g * vals[1], vals[0].shape),
                _unbroadcast(g * vals[0], vals[1].shape),
            )
        if op == "matmul":
            a, b = vals
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
            return (ga, gb)
        if op == "concat":
            axis, sizes = rec.aux
            parts = []
            offset = 0
            for size in sizes:
                key = tuple(
                    np.s_[offset : offset + size] if d == axis else np.s_[:]
                    for d in range(g.ndim)
                )
                parts.append(g[key])
                offset += size
            return tuple(parts)
        if op == "gather":
            gx = np.zeros_like(vals[0])
            np.add.at(gx, rec.aux, g)
            return (gx,)
        if op == "slice":
            gx = np.zeros_like(vals[0])
            gx[rec.aux[0]] = g
            return (gx,)
        if op == "reshape":
            return (g.reshape(rec.aux),)
        if op == "sum":
            axis, keepdims, in_shape = rec.aux
            if axis is None:
                return (np.broadcast_to(g, in_shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, in_shape).copy(),)
        if op == "log":
            return (g / vals[0],)
        if op == "sigmoid":
            s = self._values[rec.out]
            return (g * s * (1.0 - s),)
        if op == "tanh":
            t = self._values[rec.out]
            return (g * (1.0 - t * t),)
        if op == "relu":
            return (g * (vals[0] > 0.0),)
        if op == "clip":
            lo, hi = rec.aux
            return (g * ((vals[0] > lo) & (vals[0] < hi)),)
        raise GradError(f"unknown op {op!r}")  # pragma: no cover


def finite_diff_check(build_loss, leaves, step: float = 1e-5) -> float:
    """Compare tape gradients of a scalar loss against central differences.

    `build_loss(tape, leaf_nodes)` must construct the loss on the given tape
    from the given leaves and return the scalar output node.  `leaves` is a
    list of float64 arrays.  Returns the maximum over all leaf coordinates of
    ``|analytic - numeric| / max(1e-8, |numeric|)``.

    Raises GradError if the loss is non-finite at any probe point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = [_as_f64(a) for a in leaves]

    def evaluate(arrays) -> float:
        # probes may step into invalid domains; finiteness is checked explicitly
        with np.errstate(all="ignore"):
            tape = Tape()
            nodes = [tape.leaf(a) for a in arrays]
            out = build_loss(tape, nodes)
        val = float(np.asarray(out.value))
        if not np.isfinite(val):
            raise GradError("non-finite loss at finite-difference probe point")
        return val

    tape = Tape()
    nodes = [tape.leaf(a) for a in leaves]
    out = build_loss(tape, nodes)
    if not np.isfinite(float(np.asarray(out.value))):
        raise GradError("non-finite loss at finite-difference probe point")
    analytic = tape.backward(out)

    max_err = 0.0
    for li, base in enumerate(leaves):
        flat = base.ravel()
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + step
            f_plus = evaluate(leaves)
            flat[ci] = orig - step
            f_minus = evaluate(leaves)
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[li].ravel()[ci]
            err = abs(ana - numeric) / max(1e-8, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
