"""Meta-training of per-round aggregation weights by unrolling federated rounds.

Each meta-iteration rebuilds the whole T-round run on a fresh tape: the
T x K logits are the only trainable leaves, every client SGD step is
emitted through :func:`~fedunfold.model.loss_grad_graph`, and the server
average is a ``weighted_sum`` node. One reverse sweep then gives the exact
gradient of the accumulated client losses with respect to the logits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, backward
from .data import Dataset
from .fedsim import (
    AVAILABILITY,
    BATCHES,
    INIT,
    PHASE_META,
    ClientProfile,
    FedConfig,
    RoundTrace,
    full_batch,
    minibatch_plan,
    rng_stream,
    sample_availability,
    step_scales,
    tau_eff_at,
)
from .model import Batch, ModelParams, loss_grad_graph, loss_graph, mlp_init

log = logging.getLogger(__name__)


def logits_to_weights(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class WeightSchedule:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64, ndmin=2)
        if self.logits.ndim != 2:
            raise ValueError("logits must be a T x K matrix")

    @property
    def weights(self) -> np.ndarray:
        return logits_to_weights(self.logits)

    @property
    def rounds(self) -> int:
        return self.logits.shape[0]

    @property
    def clients(self) -> int:
        return self.logits.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client", "logit", "weight"])
        W = self.weights
        for t in range(self.rounds):
            for k in range(self.clients):
                w.writerow([t, k, repr(float(self.logits[t, k])), repr(float(W[t, k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, rounds: int | None = None, clients: int | None = None):
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty schedule file")
        T = max(int(r["round"]) for r in rows) + 1
        K = max(int(r["client"]) for r in rows) + 1
        if (rounds is not None and rounds != T) or (clients is not None and clients != K):
            raise ValueError(f"schedule is {T}x{K}, expected {rounds}x{clients}")
        logits = np.full((T, K), np.nan)
        for r in rows:
            logits[int(r["round"]), int(r["client"])] = float(r["logit"])
        if np.isnan(logits).any():
            raise ValueError("schedule file is missing entries")
        return cls(logits)


def schedule_init(N, rounds: int) -> WeightSchedule:
    """Every row equal to the data-proportional weights N_k / sum(N)."""
    N = np.asarray(N, dtype=np.float64)
    if N.ndim != 1 or N.size == 0 or np.any(N <= 0):
        raise ValueError("sample counts must be positive")
    row = np.log(N / N.sum())
    return WeightSchedule(np.tile(row, (rounds, 1)))


@dataclass
class MetaConfig:
    fed: FedConfig
    iterations: int = 100
    meta_lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    grad_mode: str = "unrolled"
    meta_loss_point: str = "post_aggregate"
    include_final_global_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.meta_lr <= 0:
            raise ValueError("meta learning rate must be positive")
        if self.grad_mode not in ("unrolled", "first-order"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.meta_loss_point not in ("post_local", "post_aggregate"):
            raise ValueError(f"unknown meta_loss_point {self.meta_loss_point!r}")

    @classmethod
    def from_dict(cls, d: dict, fed: FedConfig) -> "MetaConfig":
        known = set(cls.__dataclass_fields__) - {"fed"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown MetaConfig fields: {sorted(extra)}")
        return cls(fed=fed, **d)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        return cls(np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64), 0)


def adam_step(state: AdamState, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. Returns (new state, parameter delta)."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape {state.m.shape}")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    delta = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, step), delta


# ---------------------------------------------------------------------------
# graph construction


def _client_graph(tape, w_node, dataset, profile, fed, rng, t, tau_eff, first_order):
    X, Y = dataset.inputs, dataset.one_hot()
    order, ptr = minibatch_plan(dataset.n, fed.batch_size, profile.epochs_at(t), rng)
    scales = step_scales(profile, fed, t, tau_eff)
    wk = w_node
    for s in range(len(scales)):
        idx = order[ptr[s] : ptr[s + 1]]
        g = loss_grad_graph(tape, wk, fed.layer_sizes, Batch(X[idx], Y[idx]), fed.loss_kind)
        if first_order:
            g = tape.apply("stop_gradient", g)
        wk = tape.apply("sub", wk, tape.apply("scale_const", g, factor=float(scales[s])))
    return wk


def _sum_nodes(tape, nodes):
    total = nodes[0]
    for n in nodes[1:]:
        total = tape.apply("add", total, n)
    return total


def unroll_meta_loss(
    schedule: WeightSchedule,
    meta: MetaConfig,
    profiles: Sequence[ClientProfile],
    clients: Sequence[Dataset],
    iteration: int = 0,
    init: ModelParams | None = None,
):
    """Build the T-round graph. Returns (tape, loss node, logits node, trace)."""
    fed = meta.fed
    K = len(clients)
    if schedule.logits.shape != (fed.rounds, K):
        raise ValueError(f"schedule shape {schedule.logits.shape} != ({fed.rounds}, {K})")
    if fed.rounds == 0:
        raise ValueError("cannot unroll zero rounds")
    if init is None:
        init = mlp_init(fed.layer_sizes, rng_stream(meta.seed, PHASE_META, iteration, 0, INIT))
    batches = [full_batch(d) for d in clients]
    first_order = meta.grad_mode == "first-order"
    post_local = meta.meta_loss_point == "post_local"

    tape = Tape()
    logits = tape.trainable(schedule.logits)
    weights = tape.apply("softmax_row", logits)
    w = tape.constant(init.theta)
    terms = []
    trace = RoundTrace()

    for t in range(fed.rounds):
        mask = sample_availability(profiles, rng_stream(meta.seed, PHASE_META, iteration, t, AVAILABILITY))
        tau_eff = tau_eff_at(profiles, fed, t) if fed.algorithm == "fednova" else None
        locals_ = []
        for k in range(K):
            if not mask[k] and not post_local:
                locals_.append(None)
                continue
            rng = rng_stream(meta.seed, PHASE_META, iteration, t, BATCHES, k)
            locals_.append(
                _client_graph(tape, w, clients[k], profiles[k], fed, rng, t, tau_eff, first_order)
            )
        row = tape.apply("row", weights, index=t)
        contributions = [wk if m else w for wk, m in zip(locals_, mask)]
        w_next = tape.apply("weighted_sum", row, *contributions)

        at = locals_ if post_local else [w_next] * K
        round_terms = [loss_graph(tape, node, fed.layer_sizes, b) for node, b in zip(at, batches)]
        terms.extend(round_terms)
        trace.append(tape.value(row), mask, [float(tape.value(n)) for n in round_terms])
        w = w_next

    if post_local and meta.include_final_global_loss:
        terms.extend(loss_graph(tape, w, fed.layer_sizes, b) for b in batches)
    return tape, _sum_nodes(tape, terms), logits, trace


def meta_gradient(schedule, meta, profiles, clients, iteration=0, init=None):
    """(meta-loss value, d loss / d logits)."""
    tape, loss, logits, _ = unroll_meta_loss(schedule, meta, profiles, clients, iteration, init)
    adj = backward(tape, loss)
    return float(tape.value(loss)), adj[logits]


@dataclass
class TrainResult:
    schedule: WeightSchedule
    history: list[float] = field(default_factory=list)


def duw_train(meta: MetaConfig, profiles, clients, callback=None) -> TrainResult:
    """M iterations of unroll -> backward -> Adam on the schedule logits."""
    N = np.array([p.n_samples for p in profiles], dtype=np.float64)
    schedule = schedule_init(N, meta.fed.rounds)
    state = AdamState.zeros_like(schedule.logits)
    history = []
    for m in range(meta.iterations):
        try:
            value, grad = meta_gradient(schedule, meta, profiles, clients, iteration=m)
        except NonFiniteError as exc:
            raise NonFiniteError(f"meta-iteration {m}: {exc}") from exc
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"meta-iteration {m}: non-finite meta-loss {value!r}")
        history.append(value)
        state, delta = adam_step(state, grad, meta.meta_lr, meta.beta1, meta.beta2, meta.eps_adam)
        schedule = WeightSchedule(schedule.logits + delta)
        if callback is not None:
            callback(m, value, schedule)
        log.debug("meta-iteration %d loss %.6g", m, value)
    return TrainResult(schedule, history)
