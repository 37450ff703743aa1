"""Aggregation-weight strategies.

The ``weights_*`` functions are pure formulas. The strategy classes wrap
them for :func:`fedunfold.fedsim.run_federated`: each is called once per
round with a :class:`~fedunfold.fedsim.RoundContext` and advertises the
per-round quantities it needs through ``needs``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def _counts(N) -> np.ndarray:
    N = np.asarray(N, dtype=np.float64)
    if N.ndim != 1 or N.size == 0:
        raise ValueError("need a nonempty vector of sample counts")
    if np.any(N <= 0):
        raise ValueError("sample counts must be positive")
    return N


def weights_static_avg(N) -> np.ndarray:
    N = _counts(N)
    return N / N.sum()


def weights_dr(N, losses, q: float = 1.0) -> np.ndarray:
    """(N_k/N) * loss_k**(q+1), normalized."""
    N = _counts(N)
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != N.shape:
        raise ValueError("one loss per client required")
    if np.any(losses < 0):
        raise ValueError("losses must be nonnegative")
    if q < 0:
        raise ValueError("q must be nonnegative")
    num = (N / N.sum()) * losses ** (q + 1.0)
    total = num.sum()
    if total <= 0:
        raise ValueError("all DR numerators are zero")
    return num / total


def fedadp_h(phi, beta: float):
    """Gompertz-type map from a (smoothed) angle to a log-weight."""
    return beta * (1.0 - np.exp(-np.exp(-beta * (np.asarray(phi) - 1.0))))


@dataclass
class StrategyState:
    smoothed_angles: np.ndarray | None = None
    rounds_seen: int = 0
    participation: np.ndarray | None = None
    degenerate: list[int] = field(default_factory=list)


def gradient_angles(local_grads, global_grad) -> tuple[np.ndarray, list[int]]:
    """Angle between each local gradient and the global one.

    Zero-norm gradients get the neutral angle pi/2; their indices are returned.
    """
    g = np.asarray(global_grad, dtype=np.float64)
    gn = np.linalg.norm(g)
    phi, bad = [], []
    for k, gk in enumerate(local_grads):
        gk = np.asarray(gk, dtype=np.float64)
        kn = np.linalg.norm(gk)
        if gn == 0.0 or kn == 0.0:
            phi.append(np.pi / 2)
            bad.append(k)
            continue
        cos = np.clip(np.dot(g, gk) / (gn * kn), -1.0, 1.0)
        phi.append(np.arccos(cos))
    return np.array(phi), bad


def weights_fedadp(N, local_grads, global_grad, state: StrategyState | None, t: int, beta: float = 7.0):
    """Returns (weights, new state)."""
    N = _counts(N)
    if beta <= 0:
        raise ValueError("beta must be positive")
    if len(local_grads) != N.size:
        raise ValueError("one gradient per client required")
    phi, bad = gradient_angles(local_grads, global_grad)
    if bad:
        warnings.warn(f"zero-norm gradient for clients {bad}; using neutral angle", RuntimeWarning)
    prev = None if state is None else state.smoothed_angles
    if t == 0 or prev is None:
        smooth = phi
    else:
        smooth = (t / (t + 1.0)) * prev + (1.0 / (t + 1.0)) * phi
    logits = np.log(N) + fedadp_h(smooth, beta)
    e = np.exp(logits - logits.max())
    new_state = StrategyState(
        smoothed_angles=smooth,
        rounds_seen=t + 1,
        participation=None if state is None else state.participation,
        degenerate=bad,
    )
    return e / e.sum(), new_state


def _log_share_measure(x: np.ndarray, eps: float) -> np.ndarray:
    vals = -np.log2(np.maximum(x, eps))
    total = vals.sum()
    if total <= 0:
        return np.full(x.size, 1.0 / x.size)
    return vals / total


def weights_fedfa(accuracies, state: StrategyState | None, gamma: float = 0.5, eps: float = 1e-10, mask=None):
    """Returns (weights, new state). Participation counts include this round's mask."""
    L = np.asarray(accuracies, dtype=np.float64)
    K = L.size
    if K == 0:
        raise ValueError("no clients")
    if np.any(L < 0) or np.any(L > 1):
        raise ValueError("accuracies must lie in [0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mask = np.ones(K, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = np.zeros(K) if state is None or state.participation is None else state.participation.copy()
    counts = counts + mask

    acc_share = L / L.sum() if L.sum() > 0 else np.full(K, 1.0 / K)
    freq_share = counts / counts.sum() if counts.sum() > 0 else np.full(K, 1.0 / K)
    M = _log_share_measure(acc_share, eps)
    E = _log_share_measure(1.0 - freq_share, eps)
    w = gamma * M + (1.0 - gamma) * E
    new_state = StrategyState(
        smoothed_angles=None if state is None else state.smoothed_angles,
        rounds_seen=(0 if state is None else state.rounds_seen) + 1,
        participation=counts,
    )
    return w, new_state


def weights_duw(schedule, t: int) -> np.ndarray:
    W = schedule.weights if hasattr(schedule, "weights") else np.asarray(schedule)
    if not 0 <= t < W.shape[0]:
        raise IndexError(f"round {t} outside schedule of {W.shape[0]} rounds")
    return W[t].copy()


# ---------------------------------------------------------------------------
# strategy objects for the round loop


class StaticAvg:
    name = "fedavg"
    needs = ()

    def __call__(self, ctx):
        return weights_static_avg(ctx.n_samples)


class DynamicReweighting:
    name = "dr"
    needs = ("global_losses",)

    def __init__(self, q: float = 1.0):
        self.q = q

    def __call__(self, ctx):
        return weights_dr(ctx.n_samples, ctx.global_losses, self.q)


class FedAdp:
    name = "fedadp"
    needs = ("local_grads",)

    def __init__(self, beta: float = 7.0):
        self.beta = beta
        self.state = None

    def reset(self, K):
        self.state = None

    def __call__(self, ctx):
        N = np.asarray(ctx.n_samples, dtype=np.float64)
        grads = ctx.local_grads
        global_grad = sum(n * g for n, g in zip(N, grads)) / N.sum()
        w, self.state = weights_fedadp(N, grads, global_grad, self.state, ctx.t, self.beta)
        return w


class FedFa:
    name = "fedfa"
    needs = ("train_accuracy",)

    def __init__(self, gamma: float = 0.5, eps: float = 1e-10):
        self.gamma = gamma
        self.eps = eps
        self.state = None

    def reset(self, K):
        self.state = None

    def __call__(self, ctx):
        w, self.state = weights_fedfa(ctx.train_accuracy, self.state, self.gamma, self.eps, ctx.mask)
        return w


class LearnedSchedule:
    name = "duw"
    needs = ()

    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, ctx):
        return weights_duw(self.schedule, ctx.t)


def make_strategy(name: str, params: dict | None = None, schedule=None):
    params = dict(params or {})
    if name == "fedavg" or name == "fednova":
        return StaticAvg()
    if name == "dr":
        return DynamicReweighting(q=params.get("q", 1.0))
    if name == "fedadp":
        return FedAdp(beta=params.get("beta", 7.0))
    if name == "fedfa":
        return FedFa(gamma=params.get("gamma", 0.5), eps=params.get("eps", 1e-10))
    if name == "duw":
        if schedule is None:
            raise ValueError("strategy 'duw' needs a learned schedule")
        return LearnedSchedule(schedule)
    raise ValueError(f"unknown strategy {name!r}")
