"""Diagnostics for learned schedules: accuracy, weight variance, bound coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import mlp_forward


def _weights_of(schedule) -> np.ndarray:
    W = schedule.weights if hasattr(schedule, "weights") else np.asarray(schedule, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise ValueError("schedule must be a nonempty T x K matrix")
    return W


@dataclass
class VarianceReport:
    per_client: np.ndarray
    mean: float
    rounds: int


def weight_variance(schedule) -> VarianceReport:
    """Population variance over rounds of each client's weight, and its mean over clients."""
    W = _weights_of(schedule)
    centered = W - W.mean(axis=0)
    per_client = (centered**2).mean(axis=0)
    return VarianceReport(per_client, float(per_client.mean()), W.shape[0])


@dataclass
class CoefficientReport:
    A: float
    B: float
    C: float
    tau_bar: np.ndarray
    tau_tilde: float
    tau_eff: float


def theorem_coefficients(schedule, a_vectors, theta=None, data_shares=None) -> CoefficientReport:
    """Coefficients of the convergence bound for a learned schedule.

    ``a_vectors[t][k]`` is client k's step-coefficient vector in round t.
    ``theta`` defaults to the round-average of the schedule. The B
    coefficient sums theta_k * (||a||^2 - a_last^2) over clients; the
    published expression leaves the client index unbound.
    ``data_shares`` (N_k/N) sets tau_eff; defaults to ``theta``.
    """
    W = _weights_of(schedule)
    T, K = W.shape
    if len(a_vectors) != T or any(len(row) != K for row in a_vectors):
        raise ValueError(f"need a T x K = {T} x {K} table of a-vectors")
    theta = W.mean(axis=0) if theta is None else np.asarray(theta, dtype=np.float64)
    if theta.shape != (K,):
        raise ValueError("theta must have one entry per client")
    shares = theta if data_shares is None else np.asarray(data_shares, dtype=np.float64)

    A = B = C = 0.0
    tau_bar = np.zeros(T)
    tau_eff = 0.0
    for t in range(T):
        l1 = np.empty(K)
        sq = np.empty(K)
        last = np.empty(K)
        for k in range(K):
            a = np.asarray(a_vectors[t][k], dtype=np.float64)
            if a.ndim != 1 or a.size == 0 or a.sum() <= 0:
                raise ValueError(f"a-vector for round {t}, client {k} must be nonempty with positive l1 norm")
            l1[k] = np.abs(a).sum()
            sq[k] = a @ a
            last[k] = a[-1]
            tau_bar[t] += a.size
        A += K * np.sum(W[t] ** 2 * sq / l1**2)
        B += np.sum(theta * (sq - last**2))
        C += np.max(l1 * (l1 - last))
        tau_eff += np.sum(shares * l1)
    tau_bar /= K
    return CoefficientReport(A / T, B / T, C / T, tau_bar, float(tau_bar.mean()), tau_eff / T)


def rate_bound(
    coeffs: CoefficientReport,
    variance: VarianceReport,
    eta: float,
    L: float,
    sigma2: float,
    kappa2: float,
    G2: float,
    f_gap: float,
    K: int,
) -> float:
    """Right-hand side of the averaged-gradient-norm bound for user-supplied constants.

    ``f_gap`` is f(w0) - f_inf. Nothing here is estimated from data.
    """
    T = variance.rounds
    var_sum = float(variance.per_client.sum())
    return (
        4.0 * f_gap / (T * coeffs.tau_eff * eta)
        + 4.0 * eta * L * sigma2 * coeffs.A / K
        + 10.0 * eta**2 * L**2 * sigma2 * coeffs.B
        + 20.0 * eta**2 * L**2 * kappa2 * coeffs.C
        + 4.0 * 2.0**K * (sigma2 + G2) * var_sum
    )


def theorem_lr(K: int, tau_tilde: float, T: int) -> float:
    """Learning rate sqrt(K / (tau_tilde * T)) used for the stated rate."""
    return float(np.sqrt(K / (tau_tilde * T)))


def evaluate_accuracy(params, test) -> float:
    """Fraction of argmax predictions equal to the label; ties go to the lowest class."""
    if test is None or test.n == 0:
        raise ValueError("empty test set")
    P = mlp_forward(params, test.inputs)
    return float(np.mean(np.argmax(P, axis=1) == test.labels))


def variance_slope(rounds, mean_variances) -> tuple[float, list[int]]:
    """Least-squares slope of log(mean variance) against log(T).

    Returns (slope, excluded T values). Non-positive variances are excluded;
    fewer than three usable points is an error.
    """
    T = np.asarray(rounds, dtype=np.float64)
    v = np.asarray(mean_variances, dtype=np.float64)
    if T.shape != v.shape:
        raise ValueError("rounds and variances must align")
    keep = v > 0
    excluded = [int(t) for t in T[~keep]]
    if keep.sum() < 3:
        raise ValueError(
            f"need >= 3 positive variances for a slope; zero variance at T = {excluded}"
        )
    slope, _ = np.polyfit(np.log(T[keep]), np.log(v[keep]), 1)
    return float(slope), excluded
