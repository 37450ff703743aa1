"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation as a :class:`Node` holding the forward
value. :func:`backward` walks the tape in reverse and accumulates adjoints.
The op set is deliberately small: enough to write an MLP forward pass, its
closed-form gradient, SGD steps and weighted model averaging as graph ops,
so a whole multi-round federated run is differentiable with a single
reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    trainable: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Append-only list of nodes. Node ids are list positions."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    # convenience wrappers, all routed through op_apply
    def constant(self, value) -> int:
        return op_apply(self, "constant", (), {"value": value})

    def trainable(self, value) -> int:
        return op_apply(self, "trainable", (), {"value": value})

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        return op_apply(self, kind, inputs, attrs)

    def leaves(self, trainable_only: bool = True) -> list[int]:
        return [
            i
            for i, n in enumerate(self.nodes)
            if n.kind in ("constant", "trainable") and (n.trainable or not trainable_only)
        ]


# ---------------------------------------------------------------------------
# forward rules: (input values, attrs) -> value
# vjp rules: (adjoint of output, input values, output value, attrs) -> input adjoints
# A vjp returning None for an input means "no contribution".


def _check_2d(x: np.ndarray, what: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{what}: expected 2-D array, got shape {x.shape}")


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim == 1 or b.ndim == 0:
        raise ShapeError(f"matmul: left operand must be 2-D, got {a.shape}")
    if attrs.get("transpose_a"):
        a = a.T
    if attrs.get("transpose_b"):
        b = b.T
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(g, xs, out, attrs):
    a, b = xs
    ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
    a_eff = a.T if ta else a
    b_eff = b.T if tb else b
    if b_eff.ndim == 1:
        ga_eff = np.outer(g, b_eff)
        gb_eff = a_eff.T @ g
    else:
        ga_eff = g @ b_eff.T
        gb_eff = a_eff.T @ g
    return (ga_eff.T if ta else ga_eff), (gb_eff.T if tb else gb_eff)


def _same_shape(xs, kind):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")


def _fwd_add(xs, attrs):
    _same_shape(xs, "add")
    return xs[0] + xs[1]


def _fwd_sub(xs, attrs):
    _same_shape(xs, "sub")
    return xs[0] - xs[1]


def _fwd_mul(xs, attrs):
    _same_shape(xs, "mul")
    return xs[0] * xs[1]


def _fwd_add_row(xs, attrs):
    x, b = xs
    _check_2d(x, "add_row")
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_row: bias shape {b.shape} does not match {x.shape}")
    return x + b


def _fwd_scale(xs, attrs):
    x, s = xs
    if s.shape != ():
        raise ShapeError(f"scale: scale factor must be a scalar node, got {s.shape}")
    return x * s


def _vjp_scale(g, xs, out, attrs):
    x, s = xs
    return g * s, np.asarray(np.vdot(g, x))


def _fwd_scale_const(xs, attrs):
    return xs[0] * float(attrs["factor"])


def _fwd_sum(xs, attrs):
    axis = attrs.get("axis")
    return np.asarray(xs[0].sum(axis=axis))


def _vjp_sum(g, xs, out, attrs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.full(x.shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _fwd_mean(xs, attrs):
    return np.asarray(xs[0].mean())


def _fwd_mse(xs, attrs):
    _same_shape(xs, "mse")
    d = xs[0] - xs[1]
    return np.asarray(np.mean(d * d))


def _vjp_mse(g, xs, out, attrs):
    d = xs[0] - xs[1]
    gd = (2.0 * float(g) / d.size) * d
    return gd, -gd


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_softmax(xs, attrs):
    if xs[0].ndim not in (1, 2):
        raise ShapeError("softmax_row: expected 1-D or 2-D input")
    return _softmax_rows(xs[0])


def _vjp_softmax(g, xs, s, attrs):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _fwd_weighted_sum(xs, attrs):
    w, *vs = xs
    if w.shape != (len(vs),):
        raise ShapeError(f"weighted_sum: {w.shape} weights for {len(vs)} vectors")
    shape = vs[0].shape
    for v in vs:
        if v.shape != shape:
            raise ShapeError("weighted_sum: vectors differ in shape")
    out = np.zeros(shape)
    for wk, v in zip(w, vs):
        out += wk * v
    return out


def _vjp_weighted_sum(g, xs, out, attrs):
    w, *vs = xs
    gw = np.array([np.vdot(g, v) for v in vs])
    return (gw, *[wk * g for wk in w])


def _fwd_slice(xs, attrs):
    x = xs[0]
    if x.ndim != 1:
        raise ShapeError("slice: expects a flat vector")
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for length {x.shape[0]}")
    return x[start:stop].reshape(attrs.get("shape", (stop - start,))).copy()


def _vjp_slice(g, xs, out, attrs):
    full = np.zeros_like(xs[0])
    full[attrs["start"] : attrs["stop"]] = g.ravel()
    return (full,)


def _fwd_concat(xs, attrs):
    return np.concatenate([x.ravel() for x in xs])


def _vjp_concat(g, xs, out, attrs):
    parts, pos = [], 0
    for x in xs:
        parts.append(g[pos : pos + x.size].reshape(x.shape))
        pos += x.size
    return tuple(parts)


def _fwd_row(xs, attrs):
    x = xs[0]
    _check_2d(x, "row")
    return x[attrs["index"]].copy()


def _vjp_row(g, xs, out, attrs):
    full = np.zeros_like(xs[0])
    full[attrs["index"]] = g
    return (full,)


_Rule = tuple[Callable, Callable | None]

_RULES: dict[str, _Rule] = {
    "matmul": (_fwd_matmul, _vjp_matmul),
    "add": (_fwd_add, lambda g, xs, o, a: (g, g)),
    "sub": (_fwd_sub, lambda g, xs, o, a: (g, -g)),
    "mul": (_fwd_mul, lambda g, xs, o, a: (g * xs[1], g * xs[0])),
    "add_row": (_fwd_add_row, lambda g, xs, o, a: (g, g.sum(axis=0))),
    "scale": (_fwd_scale, _vjp_scale),
    "scale_const": (_fwd_scale_const, lambda g, xs, o, a: (g * float(a["factor"]),)),
    "relu": (lambda xs, a: np.maximum(xs[0], 0.0), lambda g, xs, o, a: (g * (xs[0] > 0),)),
    # derivative of relu; piecewise constant so its own derivative is zero
    "relu_mask": (lambda xs, a: (xs[0] > 0).astype(np.float64), None),
    "mean": (_fwd_mean, lambda g, xs, o, a: (np.full(xs[0].shape, float(g) / xs[0].size),)),
    "sum": (_fwd_sum, _vjp_sum),
    "mse": (_fwd_mse, _vjp_mse),
    "softmax_row": (_fwd_softmax, _vjp_softmax),
    "stop_gradient": (lambda xs, a: xs[0].copy(), None),
    "weighted_sum": (_fwd_weighted_sum, _vjp_weighted_sum),
    "slice": (_fwd_slice, _vjp_slice),
    "concat": (_fwd_concat, _vjp_concat),
    "row": (_fwd_row, _vjp_row),
}

OP_KINDS = ("constant", "trainable", *_RULES)


def op_apply(tape: Tape, kind: str, inputs: Sequence[int] = (), attrs: dict | None = None) -> int:
    """Evaluate one op on existing nodes and append the result to ``tape``."""
    attrs = dict(attrs or {})
    inputs = tuple(int(i) for i in inputs)
    n = len(tape.nodes)
    for i in inputs:
        if not 0 <= i < n:
            raise IndexError(f"{kind}: input node {i} not on tape (size {n})")

    if kind in ("constant", "trainable"):
        if inputs:
            raise ValueError(f"{kind} leaf takes no inputs")
        value = np.array(attrs.pop("value"), dtype=np.float64)
        trainable = kind == "trainable"
    else:
        try:
            fwd, _ = _RULES[kind]
        except KeyError:
            raise ValueError(f"unsupported op kind {kind!r}") from None
        value = np.asarray(fwd([tape.nodes[i].value for i in inputs], attrs), dtype=np.float64)
        trainable = False

    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind}: non-finite forward value")
    tape.nodes.append(Node(kind, inputs, value, attrs, trainable))
    return n


def backward(tape: Tape, seed: int) -> dict[int, np.ndarray]:
    """Reverse sweep from the scalar node ``seed``.

    Returns adjoints for every node that received one, plus a (possibly
    zero) entry for every trainable leaf.
    """
    seed_node = tape.nodes[seed]
    if seed_node.value.shape != ():
        raise ShapeError(f"backward seed must be scalar, got shape {seed_node.value.shape}")

    adj: dict[int, np.ndarray] = {seed: np.ones(())}
    for i in range(seed, -1, -1):
        g = adj.get(i)
        if g is None:
            continue
        node = tape.nodes[i]
        if not node.inputs:
            continue
        vjp = _RULES[node.kind][1]
        if vjp is None:
            continue
        xs = [tape.nodes[j].value for j in node.inputs]
        grads = vjp(g, xs, node.value, node.attrs)
        for j, gj in zip(node.inputs, grads):
            if gj is None:
                continue
            gj = np.asarray(gj, dtype=np.float64)
            if j in adj:
                adj[j] = adj[j] + gj
            else:
                adj[j] = gj

    for i, node in enumerate(tape.nodes):
        if node.trainable and i not in adj:
            adj[i] = np.zeros_like(node.value)
    return adj
