"""Federated execution engine: local updates, heterogeneity, aggregation, round loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .autodiff import NonFiniteError
from .data import Dataset
from .model import LOSS_KINDS, Batch, ModelParams, loss_eval, mlp_forward, mlp_init

SIMPLEX_TOL = 1e-9

# stream purposes
BATCHES = 0
AVAILABILITY = 1
INIT = 2

# stream phases, so evaluation runs never replay meta-training draws
PHASE_EVAL = 0
PHASE_META = 1


def rng_stream(seed: int, phase: int, run: int, t: int, purpose: int, client: int = 0):
    """Counter-based (Philox) generator owned by one (run, round, purpose, client) cell."""
    key = [int(seed), int(phase), int(run), int(t), int(purpose), int(client)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class ClientProfile:
    n_samples: int
    epochs: int = 1
    comm_prob: float = 1.0
    epochs_per_round: list[int] | None = None

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.comm_prob <= 1.0:
            raise ValueError(f"comm_prob {self.comm_prob} outside [0, 1]")
        if self.epochs_per_round is not None and any(e < 1 for e in self.epochs_per_round):
            raise ValueError("per-round epochs must be >= 1")

    def epochs_at(self, t: int) -> int:
        if self.epochs_per_round:
            return int(self.epochs_per_round[t % len(self.epochs_per_round)])
        return int(self.epochs)


@dataclass
class FedConfig:
    layer_sizes: tuple[int, ...]
    rounds: int = 10
    lr: float = 0.01
    batch_size: int = 50
    algorithm: str = "fedavg"
    local_solver: str = "sgd"
    prox_mu: float = 0.0
    tau_eff: float | None = None
    loss_kind: str = "mse"
    renormalize: bool = False
    seed: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm not in ("fedavg", "fednova"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.local_solver not in ("sgd", "prox"):
            raise ValueError(f"unknown local solver {self.local_solver!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def alpha(self) -> float:
        return self.lr * self.prox_mu if self.local_solver == "prox" else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown FedConfig fields: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# local updates


def a_vector(algorithm: str, tau: int, alpha: float = 0.0) -> np.ndarray:
    """Per-step coefficients of the generalized local update."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if algorithm in ("fedavg", "sgd"):
        return np.ones(tau)
    if algorithm in ("fedprox", "prox"):
        return (1.0 - alpha) ** np.arange(tau - 1, -1, -1, dtype=np.float64)
    raise ValueError(f"unknown a-vector family {algorithm!r}")


def minibatch_plan(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Row order and batch boundaries for ``epochs`` shuffled passes."""
    if n < 1:
        raise ValueError("empty local dataset")
    per_epoch = math.ceil(n / batch_size)
    order = np.concatenate([rng.permutation(n) for _ in range(epochs)]).astype(np.int64)
    ptr = [0]
    for e in range(epochs):
        base = e * n
        for b in range(1, per_epoch + 1):
            ptr.append(base + min(b * batch_size, n))
    return order, np.asarray(ptr, dtype=np.int64)


def local_steps(profile: ClientProfile, config: FedConfig, t: int) -> int:
    return profile.epochs_at(t) * math.ceil(profile.n_samples / config.batch_size)


def round_a_vectors(profiles: Sequence[ClientProfile], config: FedConfig, t: int) -> list[np.ndarray]:
    family = "fedprox" if config.local_solver == "prox" else "fedavg"
    return [a_vector(family, local_steps(p, config, t), config.alpha) for p in profiles]


def data_shares(profiles: Sequence[ClientProfile]) -> np.ndarray:
    N = np.array([p.n_samples for p in profiles], dtype=np.float64)
    if N.sum() <= 0:
        raise ValueError("total sample count is zero")
    return N / N.sum()


def tau_eff_at(profiles: Sequence[ClientProfile], config: FedConfig, t: int) -> float:
    """Configured value, else sum_k (N_k/N) * ||a_k||_1 (sum_k (N_k/N) tau_k for SGD)."""
    if config.tau_eff is not None:
        return float(config.tau_eff)
    shares = data_shares(profiles)
    return float(sum(s * a.sum() for s, a in zip(shares, round_a_vectors(profiles, config, t))))


def step_scales(profile, config, t, tau_eff=None) -> np.ndarray:
    """Step size for every local step of client ``profile`` in round ``t``."""
    tau = local_steps(profile, config, t)
    if config.algorithm == "fedavg":
        return np.full(tau, config.lr)
    family = "fedprox" if config.local_solver == "prox" else "fedavg"
    a = a_vector(family, tau, config.alpha)
    norm = a.sum()
    if norm <= 0:
        raise ValueError("a-vector has zero l1 norm")
    return config.lr * tau_eff * a / norm


def _client_batches(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return dataset.inputs, dataset.one_hot()


def _run_steps(dataset, profile, params, config, rng, t, scales):
    if dataset.n == 0:
        raise ValueError("client has an empty local dataset")
    X, Y = _client_batches(dataset)
    order, ptr = minibatch_plan(dataset.n, config.batch_size, profile.epochs_at(t), rng)
    theta = kernels.sgd_steps(
        params.theta, params.layer_sizes, X, Y, order, ptr, scales, LOSS_KINDS[config.loss_kind]
    )
    return params.with_theta(theta)


def client_update(dataset, profile, params, config, rng, t=0) -> ModelParams:
    """E_k epochs of minibatch SGD with step size ``config.lr``."""
    scales = np.full(local_steps(profile, config, t), config.lr)
    return _run_steps(dataset, profile, params, config, rng, t, scales)


def client_update_nova(dataset, profile, params, config, rng, t, tau_eff) -> ModelParams:
    """tau_k local steps, step i scaled by lr * tau_eff * a_i / ||a||_1."""
    nova = config if config.algorithm == "fednova" else _as_nova(config)
    scales = step_scales(profile, nova, t, tau_eff)
    return _run_steps(dataset, profile, params, config, rng, t, scales)


def _as_nova(config: FedConfig) -> FedConfig:
    d = asdict(config)
    d["algorithm"] = "fednova"
    return FedConfig(**d)


def sample_availability(profiles: Sequence[ClientProfile], rng: np.random.Generator) -> np.ndarray:
    p = np.array([pr.comm_prob for pr in profiles])
    return rng.random(p.size) < p


def check_simplex(weights, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights off the simplex: sum={w.sum()!r}, min={w.min()!r}")
    return w


def aggregate(client_params, weights, mask=None, fallback=None, renormalize=False) -> np.ndarray:
    """sum_k weight_k * contribution_k; a masked-out client contributes ``fallback``."""
    vecs = [np.asarray(getattr(p, "theta", p), dtype=np.float64) for p in client_params]
    w = check_simplex(weights)
    if len(vecs) != w.size:
        raise ValueError(f"{len(vecs)} client vectors for {w.size} weights")
    d = vecs[0].shape
    if any(v.shape != d for v in vecs):
        raise ValueError("client parameter vectors differ in dimension")
    if mask is None:
        mask = np.ones(w.size, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.all():
        if fallback is None:
            raise ValueError("fallback params required when some clients are masked")
        fb = np.asarray(getattr(fallback, "theta", fallback), dtype=np.float64)
        if fb.shape != d:
            raise ValueError("fallback dimension mismatch")
        if renormalize:
            if not mask.any():
                return fb.copy()
            w = np.where(mask, w, 0.0)
            w = w / w.sum()
        vecs = [v if m else fb for v, m in zip(vecs, mask)]
    out = np.zeros(d)
    for wk, v in zip(w, vecs):
        out += wk * v
    return out


# ---------------------------------------------------------------------------
# round loop


@dataclass
class RoundContext:
    """What a weighting strategy may look at in round ``t``."""

    t: int
    n_samples: np.ndarray
    mask: np.ndarray
    global_params: ModelParams
    local_params: list[ModelParams]
    global_losses: np.ndarray | None = None
    local_grads: list[np.ndarray] | None = None
    train_accuracy: np.ndarray | None = None


@dataclass
class RoundTrace:
    weights: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    losses: list[np.ndarray] = field(default_factory=list)
    params: list[np.ndarray] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.weights)

    def append(self, weights, mask, losses, params=None, accuracy=None):
        self.weights.append(np.asarray(weights, dtype=np.float64))
        self.masks.append(np.asarray(mask, dtype=bool))
        self.losses.append(np.asarray(losses, dtype=np.float64))
        if params is not None:
            self.params.append(np.asarray(params, dtype=np.float64))
        if accuracy is not None:
            self.accuracy.append(float(accuracy))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client", "weight", "loss", "available"])
        for t, (ws, m, ls) in enumerate(zip(self.weights, self.masks, self.losses)):
            for k in range(ws.size):
                w.writerow([t, k, repr(float(ws[k])), repr(float(ls[k])), int(m[k])])
        return buf.getvalue()

    def to_json(self, include_params: bool = False) -> str:
        d = {
            "weights": [w.tolist() for w in self.weights],
            "available": [m.astype(int).tolist() for m in self.masks],
            "losses": [l.tolist() for l in self.losses],
            "accuracy": self.accuracy,
        }
        if include_params:
            d["params"] = [p.tolist() for p in self.params]
        return json.dumps(d, indent=1)


def full_batch(dataset: Dataset) -> Batch:
    return Batch(dataset.inputs, dataset.one_hot())


def local_accuracy(params: ModelParams, dataset: Dataset) -> float:
    P = mlp_forward(params, dataset.inputs)
    return float(np.mean(np.argmax(P, axis=1) == dataset.labels))


def run_federated(
    config: FedConfig,
    profiles: Sequence[ClientProfile],
    clients: Sequence[Dataset],
    strategy,
    test_set: Dataset | None = None,
    run_index: int = 0,
    init: ModelParams | None = None,
    executor=None,
    keep_params: bool = False,
    phase: int = PHASE_EVAL,
) -> tuple[RoundTrace, ModelParams]:
    """T rounds of share -> local update -> weighting -> aggregation.

    ``executor`` (anything with ``map``) runs client updates concurrently;
    results do not depend on it because each (client, round) owns its stream.
    """
    from .analysis import evaluate_accuracy

    K = len(clients)
    if len(profiles) != K:
        raise ValueError(f"{len(profiles)} profiles for {K} client datasets")
    for p, d in zip(profiles, clients):
        if p.n_samples != d.n:
            raise ValueError(f"profile says {p.n_samples} samples, dataset has {d.n}")
    N = np.array([p.n_samples for p in profiles], dtype=np.float64)
    batches = [full_batch(d) for d in clients]

    if init is None:
        init = mlp_init(config.layer_sizes, rng_stream(config.seed, phase, run_index, 0, INIT))
    w = init
    trace = RoundTrace()
    needs = set(getattr(strategy, "needs", ()))
    if hasattr(strategy, "reset"):
        strategy.reset(K)

    for t in range(config.rounds):
        mask = sample_availability(profiles, rng_stream(config.seed, phase, run_index, t, AVAILABILITY))
        tau_eff = tau_eff_at(profiles, config, t) if config.algorithm == "fednova" else None

        def work(k, w=w, t=t, tau_eff=tau_eff):
            rng = rng_stream(config.seed, phase, run_index, t, BATCHES, k)
            if config.algorithm == "fednova":
                return client_update_nova(clients[k], profiles[k], w, config, rng, t, tau_eff)
            return client_update(clients[k], profiles[k], w, config, rng, t)

        local = list(executor.map(work, range(K))) if executor is not None else [work(k) for k in range(K)]
        losses = np.array([loss_eval(lp, b, config.loss_kind) for lp, b in zip(local, batches)])

        ctx = RoundContext(t, N, mask, w, local)
        if "global_losses" in needs:
            ctx.global_losses = np.array([loss_eval(w, b, config.loss_kind) for b in batches])
        if "local_grads" in needs:
            ctx.local_grads = [(w.theta - lp.theta) / config.lr for lp in local]
        if "train_accuracy" in needs:
            ctx.train_accuracy = np.array([local_accuracy(lp, d) for lp, d in zip(local, clients)])
        weights = check_simplex(strategy(ctx))

        theta = aggregate(local, weights, mask, w, config.renormalize)
        if not np.all(np.isfinite(theta)):
            raise NonFiniteError(f"round {t}: global model has non-finite parameters")
        w = w.with_theta(theta)
        acc = evaluate_accuracy(w, test_set) if test_set is not None else None
        trace.append(weights, mask, losses, w.theta if keep_params else None, acc)
    return trace, w
