"""Fully connected ReLU MLP over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import NonFiniteError, ShapeError, Tape

LOSS_KINDS = {"mse": kernels.MSE, "cross-entropy": kernels.CROSS_ENTROPY}


@dataclass
class ModelParams:
    layer_sizes: tuple[int, ...]
    theta: np.ndarray

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.layer_sizes),):
            raise ShapeError(
                f"theta has length {self.theta.size}, layer sizes {self.layer_sizes} "
                f"need {param_count(self.layer_sizes)}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteError("non-finite model parameters")

    @property
    def d(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(self.layer_sizes, theta)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer, ``W`` shaped (n_in, n_out)."""
        return kernels._pykernels._unpack(self.theta, self.layer_sizes)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] < 1:
            raise ShapeError("batch needs n >= 1 rows in both inputs and targets")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def layer_slices(layer_sizes) -> list[tuple[int, int, int, int, int, int]]:
    """Per layer: (w_start, w_stop, b_start, b_stop, n_in, n_out)."""
    out, pos = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w0, w1 = pos, pos + n_in * n_out
        out.append((w0, w1, w1, w1 + n_out, n_in, n_out))
        pos = w1 + n_out
    return out


def param_count(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_init(layer_sizes, seed) -> ModelParams:
    """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weights, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output layer size")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive: {sizes}")
    rng = np.random.default_rng(seed)
    parts = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        parts.append(rng.uniform(-bound, bound, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return ModelParams(sizes, np.concatenate(parts))


def _check_inputs(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input width {X.shape[-1]} != first layer size {params.layer_sizes[0]}")
    return X


def mlp_forward(params: ModelParams, inputs) -> np.ndarray:
    return kernels.forward(params.theta, params.layer_sizes, _check_inputs(params, inputs))


def _loss_code(loss_kind: str) -> int:
    try:
        return LOSS_KINDS[loss_kind]
    except KeyError:
        raise ValueError(f"unsupported loss kind {loss_kind!r}") from None


def _check_batch(params: ModelParams, batch: Batch) -> None:
    _check_inputs(params, batch.inputs)
    if batch.targets.shape[1] != params.layer_sizes[-1]:
        raise ShapeError(
            f"target width {batch.targets.shape[1]} != output size {params.layer_sizes[-1]}"
        )


def loss_eval(params: ModelParams, batch: Batch, loss_kind: str = "mse") -> float:
    code = _loss_code(loss_kind)
    _check_batch(params, batch)
    P = mlp_forward(params, batch.inputs)
    if code == kernels.MSE:
        R = P - batch.targets
        return float(np.mean(R * R))
    Z = P - P.max(axis=1, keepdims=True)
    logS = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return float(-np.sum(batch.targets * logS) / batch.n)


def loss_grad(params: ModelParams, batch: Batch, loss_kind: str = "mse") -> np.ndarray:
    code = _loss_code(loss_kind)
    _check_batch(params, batch)
    _, g = kernels.loss_grad(params.theta, params.layer_sizes, batch.inputs, batch.targets, code)
    return g


# ---------------------------------------------------------------------------
# graph-expressed versions


def forward_graph(tape: Tape, params_node: int, layer_sizes, X_node: int):
    """Emit the forward pass; returns (output node, [post-activation nodes])."""
    acts = [X_node]
    slices = layer_slices(layer_sizes)
    for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(slices):
        W = tape.apply("slice", params_node, start=w0, stop=w1, shape=(n_in, n_out))
        b = tape.apply("slice", params_node, start=b0, stop=b1)
        Z = tape.apply("add_row", tape.apply("matmul", acts[-1], W), b)
        if li < len(slices) - 1:
            acts.append(tape.apply("relu", Z))
        else:
            return Z, acts
    raise AssertionError("unreachable")


def loss_graph(tape: Tape, params_node: int, layer_sizes, batch: Batch, loss_kind: str = "mse") -> int:
    """Scalar loss node. MSE only; cross-entropy is a client-training loss."""
    if loss_kind != "mse":
        raise ValueError(f"loss_graph supports mse only, got {loss_kind!r}")
    X = tape.constant(batch.inputs)
    Y = tape.constant(batch.targets)
    P, _ = forward_graph(tape, params_node, layer_sizes, X)
    return tape.apply("mse", P, Y)


def loss_grad_graph(
    tape: Tape, params_node: int, layer_sizes, batch: Batch, loss_kind: str = "mse"
) -> int:
    """Emit the closed-form backprop gradient as tape ops.

    The result is an ordinary node, so a later ``backward`` differentiates
    through it (second-order paths included) without double-backward.
    """
    code = _loss_code(loss_kind)
    layer_sizes = tuple(layer_sizes)
    if tape.value(params_node).shape != (param_count(layer_sizes),):
        raise ShapeError("params node does not match layer sizes")
    X = tape.constant(batch.inputs)
    Y = tape.constant(batch.targets)
    slices = layer_slices(layer_sizes)

    acts, pre, weights = [X], [], []
    for li, (w0, w1, b0, b1, n_in, n_out) in enumerate(slices):
        W = tape.apply("slice", params_node, start=w0, stop=w1, shape=(n_in, n_out))
        b = tape.apply("slice", params_node, start=b0, stop=b1)
        weights.append(W)
        Z = tape.apply("add_row", tape.apply("matmul", acts[-1], W), b)
        pre.append(Z)
        if li < len(slices) - 1:
            acts.append(tape.apply("relu", Z))
    P = pre[-1]

    n = batch.n
    if code == kernels.MSE:
        delta = tape.apply("scale_const", tape.apply("sub", P, Y), factor=2.0 / (n * layer_sizes[-1]))
    else:
        S = tape.apply("softmax_row", P)
        delta = tape.apply("scale_const", tape.apply("sub", S, Y), factor=1.0 / n)

    pieces = []
    for li in range(len(slices) - 1, -1, -1):
        gW = tape.apply("matmul", acts[li], delta, transpose_a=True)
        gb = tape.apply("sum", delta, axis=0)
        pieces.append(gb)
        pieces.append(gW)
        if li > 0:
            back = tape.apply("matmul", delta, weights[li], transpose_b=True)
            delta = tape.apply("mul", back, tape.apply("relu_mask", pre[li - 1]))
    return tape.apply("concat", *pieces[::-1])
