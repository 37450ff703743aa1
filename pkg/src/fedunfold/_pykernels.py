"""Pure-numpy MLP kernels. Same contract as the compiled ``_ckernels``.

Parameter layout for every layer: weight matrix (n_in x n_out, row-major)
followed by the bias vector (n_out). Hidden layers use ReLU, the output
layer is affine. ``loss_kind`` 0 is mean squared error, 1 is softmax
cross-entropy against one-hot targets.
"""

import numpy as np

MSE = 0
CROSS_ENTROPY = 1


def _unpack(theta, sizes):
    layers, pos = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = theta[pos : pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = theta[pos : pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def forward(theta, sizes, X):
    A = X
    layers = _unpack(theta, sizes)
    for W, b in layers[:-1]:
        A = np.maximum(A @ W + b, 0.0)
    W, b = layers[-1]
    return A @ W + b


def loss_grad(theta, sizes, X, Y, loss_kind):
    """Return (loss, flat gradient) over the full batch ``X, Y``."""
    layers = _unpack(theta, sizes)
    acts = [X]
    for W, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ W + b, 0.0))
    W, b = layers[-1]
    P = acts[-1] @ W + b
    n = X.shape[0]
    if loss_kind == MSE:
        R = P - Y
        loss = float(np.sum(R * R) / R.size)
        delta = (2.0 / R.size) * R
    else:
        Z = P - P.max(axis=1, keepdims=True)
        E = np.exp(Z)
        S = E / E.sum(axis=1, keepdims=True)
        logS = Z - np.log(E.sum(axis=1, keepdims=True))
        loss = float(-np.sum(Y * logS) / n)
        delta = (S - Y) / n

    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        A_prev = acts[li]
        grads.append(delta.sum(axis=0))
        grads.append((A_prev.T @ delta).ravel())
        if li > 0:
            delta = (delta @ W.T) * (A_prev > 0)
    return loss, np.concatenate(grads[::-1])


def sgd_steps(theta, sizes, X, Y, order, batch_ptr, scales, loss_kind):
    """Run ``len(scales)`` SGD steps, step ``s`` on rows
    ``order[batch_ptr[s]:batch_ptr[s+1]]`` with step size ``scales[s]``."""
    w = np.array(theta, dtype=np.float64)
    for s in range(len(scales)):
        idx = order[batch_ptr[s] : batch_ptr[s + 1]]
        _, g = loss_grad(w, sizes, X[idx], Y[idx], loss_kind)
        w -= scales[s] * g
    return w
