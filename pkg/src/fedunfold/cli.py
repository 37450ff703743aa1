"""Config-driven experiment runner.

    fedunfold partition      CONFIG
    fedunfold train-weights  CONFIG
    fedunfold run            CONFIG [--schedule PATH]
    fedunfold analyze        CONFIG

Every numeric setting lives in the JSON config. ``--seed`` overrides the
master seed and ``FEDUNFOLD_OUTPUT_DIR`` overrides the output directory.
Exit codes: 0 ok, 1 config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import theorem_coefficients, variance_slope, weight_variance
from .autodiff import NonFiniteError
from .data import (
    Dataset,
    IDXError,
    PartitionSpec,
    balanced_subset,
    class_histogram,
    load_idx,
    partition,
    synth_blobs,
    train_test_split,
)
from .fedsim import ClientProfile, FedConfig, a_vector, run_federated
from .unfolding import MetaConfig, WeightSchedule, duw_train
from .weighting import make_strategy

log = logging.getLogger("fedunfold")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def npz_bytes(**arrays) -> bytes:
    """``.npz`` archive with fixed member timestamps, so reruns are byte-identical."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# config


@dataclass
class Experiment:
    config: dict
    base: Path
    seed: int
    output_dir: Path
    clients: list[Dataset]
    test: Dataset | None
    profiles: list[ClientProfile]
    fed: FedConfig
    classes: int


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def output_dir_for(cfg: dict, base: Path) -> Path:
    env = os.environ.get("FEDUNFOLD_OUTPUT_DIR")
    if env:
        return Path(env)
    return _resolve(base, cfg.get("output_dir", "out"))


def _per_client(value, K, name, cast):
    if isinstance(value, list):
        if len(value) != K:
            raise ConfigError(f"clients.{name} has {len(value)} entries for {K} clients")
        return [cast(v) for v in value]
    return [cast(value)] * K


def load_dataset(cfg: dict, base: Path, seed: int) -> tuple[Dataset, Dataset | None]:
    ds = cfg.get("dataset")
    if not ds:
        raise ConfigError("config lacks a 'dataset' section")
    source = ds.get("source")
    if source == "synth":
        pool = synth_blobs(
            int(ds["classes"]),
            int(ds["dims"]),
            int(ds["per_class"]) + int(ds.get("test_per_class", 0)),
            float(ds.get("spread", 1.0)),
            int(ds.get("seed", seed)),
        )
        if int(ds.get("test_per_class", 0)) > 0:
            return train_test_split(pool, int(ds["test_per_class"]), int(ds.get("seed", seed)))
        return pool, None
    if source == "idx":
        for key in ("train_images", "train_labels"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} missing")
        train = load_idx(_resolve(base, ds["train_images"]), _resolve(base, ds["train_labels"]))
        test = None
        if "test_images" in ds:
            test = load_idx(_resolve(base, ds["test_images"]), _resolve(base, ds["test_labels"]))
            if ds.get("test_per_class"):
                test = balanced_subset(test, int(ds["test_per_class"]), seed)
        return train, test
    raise ConfigError(f"unknown dataset source {source!r}")


def build_experiment(cfg: dict, base: Path, seed_override: int | None = None) -> Experiment:
    try:
        seed = int(cfg.get("seed", 0)) if seed_override is None else int(seed_override)
        train, test = load_dataset(cfg, base, seed)
        pspec = dict(cfg["partition"])
        pspec.setdefault("seed", seed)
        clients = partition(train, PartitionSpec.from_dict(pspec))
        K = len(clients)
        cl = cfg.get("clients", {})
        epochs = _per_client(cl.get("epochs", 1), K, "epochs", int)
        probs = _per_client(cl.get("comm_prob", 1.0), K, "comm_prob", float)
        per_round = cl.get("epochs_per_round")
        if per_round is not None and len(per_round) != K:
            raise ConfigError("clients.epochs_per_round needs one list per client")
        profiles = [
            ClientProfile(d.n, epochs[k], probs[k], None if per_round is None else per_round[k])
            for k, d in enumerate(clients)
        ]
        fed_d = dict(cfg.get("fed", {}))
        hidden = fed_d.pop("hidden", [])
        fed_d["layer_sizes"] = [train.inputs.shape[1], *hidden, train.classes]
        fed_d["seed"] = seed
        fed = FedConfig.from_dict(fed_d)
    except (ConfigError, IDXError):
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc!r}") from exc
    return Experiment(cfg, base, seed, output_dir_for(cfg, base), clients, test, profiles, fed, train.classes)


def meta_config(exp: Experiment) -> MetaConfig:
    d = dict(exp.config.get("meta", {}))
    d["seed"] = exp.seed
    try:
        return MetaConfig.from_dict(d, exp.fed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid meta section: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_partition(exp: Experiment) -> list[Path]:
    out = exp.output_dir / "partition"
    written = []
    for k, d in enumerate(exp.clients):
        path = out / f"client_{k}.npz"
        write_atomic(path, npz_bytes(inputs=d.inputs, labels=d.labels, classes=np.int64(d.classes)))
        written.append(path)
    H = class_histogram(exp.clients, exp.classes)
    rows = [(k, j, int(H[k, j])) for k in range(H.shape[0]) for j in range(H.shape[1])]
    hist = out / "histogram.csv"
    write_atomic(hist, _csv(["client", "class", "count"], rows))
    written.append(hist)
    return written


def cmd_train_weights(exp: Experiment) -> WeightSchedule:
    meta = meta_config(exp)
    result = duw_train(meta, exp.profiles, exp.clients)
    save_schedule(exp.output_dir, result.schedule, meta.digest())
    write_atomic(
        exp.output_dir / "meta_loss.csv",
        _csv(["iteration", "meta_loss"], [(m, _fmt(v)) for m, v in enumerate(result.history)]),
    )
    return result.schedule


def save_schedule(out: Path, schedule: WeightSchedule, digest: str) -> None:
    write_atomic(out / "schedule.csv", schedule.to_csv())
    header = {"T": schedule.rounds, "K": schedule.clients, "config_hash": digest}
    write_atomic(out / "schedule.json", json.dumps(header, indent=1, sort_keys=True) + "\n")


def load_schedule(path: Path, rounds=None, clients=None) -> WeightSchedule:
    try:
        return WeightSchedule.from_csv(Path(path).read_text(), rounds, clients)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_run(exp: Experiment, schedule_path=None) -> list[float]:
    scfg = dict(exp.config.get("strategy", {"name": "fedavg"}))
    name = scfg.pop("name", "fedavg")
    repeats = int(exp.config.get("repeat", 1))
    schedule = None
    if name == "duw":
        if schedule_path is None:
            schedule_path = scfg.pop("schedule", None)
            schedule_path = _resolve(exp.base, schedule_path) if schedule_path else exp.output_dir / "schedule.csv"
        schedule = load_schedule(schedule_path, exp.fed.rounds, len(exp.clients))
    if exp.test is None:
        raise ConfigError("run needs a test set (dataset.test_per_class or dataset.test_images)")
    make_strategy(name, scfg, schedule)  # validate before spending time

    def one(r):
        strat = make_strategy(name, scfg, schedule)
        return run_federated(exp.fed, exp.profiles, exp.clients, strat, exp.test, run_index=r)

    workers = int(exp.config.get("workers", 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(repeats)))
    else:
        results = [one(r) for r in range(repeats)]

    finals = []
    for r, (trace, _) in enumerate(results):
        write_atomic(exp.output_dir / f"trace_{r}.csv", trace.to_csv())
        write_atomic(
            exp.output_dir / f"curve_{r}.csv",
            _csv(["round", "accuracy"], [(t, _fmt(a)) for t, a in enumerate(trace.accuracy)]),
        )
        finals.append(trace.accuracy[-1] if trace.accuracy else float("nan"))
    rows = [(r, _fmt(a), "") for r, a in enumerate(finals)]
    rows.append(("summary", _fmt(np.mean(finals)), _fmt(np.std(finals))))
    write_atomic(exp.output_dir / "accuracy.csv", _csv(["repeat", "accuracy", "std"], rows))
    return finals


def _a_table(cfg: dict, T: int, K: int):
    family = cfg.get("family", "fedavg")
    alpha = float(cfg.get("alpha", 0.0))
    tau = cfg.get("tau", 1)
    if isinstance(tau, int):
        tau = [[tau] * K] * T
    elif tau and isinstance(tau[0], int):
        if len(tau) != K:
            raise ConfigError(f"tau lists {len(tau)} clients, schedule has {K}")
        tau = [tau] * T
    if len(tau) != T or any(len(row) != K for row in tau):
        raise ConfigError("tau table does not match schedule shape")
    return [[a_vector(family, int(x), alpha) for x in row] for row in tau]


def cmd_analyze(cfg: dict, base: Path) -> dict:
    out = output_dir_for(cfg, base)
    paths = cfg.get("schedules")
    if not paths:
        raise ConfigError("analyze config needs a nonempty 'schedules' list")
    schedules = [load_schedule(_resolve(base, p)) for p in paths]
    reports = [weight_variance(s) for s in schedules]
    write_atomic(
        out / "variance.csv",
        _csv(["T", "mean_variance"], [(rep.rounds, _fmt(rep.mean)) for rep in reports]),
    )
    coeff_rows = []
    for s in schedules:
        c = theorem_coefficients(s, _a_table(cfg.get("a_vectors", {}), s.rounds, s.clients), cfg.get("theta"))
        coeff_rows.append((_fmt(c.A), _fmt(c.B), _fmt(c.C), _fmt(c.tau_eff)))
    write_atomic(out / "coefficients.csv", _csv(["Atilde", "Btilde", "Ctilde", "tau_eff"], coeff_rows))
    try:
        slope, excluded = variance_slope([r.rounds for r in reports], [r.mean for r in reports])
    except ValueError as exc:
        write_atomic(out / "slope.txt", f"error: {exc}\n")
        raise ConfigError(f"slope: {exc}") from exc
    text = f"slope {slope!r}\n"
    if excluded:
        text += f"excluded_T {' '.join(map(str, excluded))}\n"
    write_atomic(out / "slope.txt", text)
    return {"slope": slope, "excluded": excluded}


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedunfold", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("partition", "train-weights", "run", "analyze"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "run":
            sp.add_argument("--schedule", default=None, help="learned schedule CSV for strategy duw")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
        if args.command == "analyze":
            res = cmd_analyze(cfg, base)
            print(f"log-log slope of mean weight variance vs T: {res['slope']:.4f}")
            return EXIT_OK
        exp = build_experiment(cfg, base, args.seed)
        if args.command == "partition":
            for p in cmd_partition(exp):
                log.info("wrote %s", p)
        elif args.command == "train-weights":
            s = cmd_train_weights(exp)
            log.info("learned %dx%d schedule -> %s", s.rounds, s.clients, exp.output_dir / "schedule.csv")
        elif args.command == "run":
            finals = cmd_run(exp, args.schedule)
            print(f"final test accuracy {np.mean(finals):.4f} +/- {np.std(finals):.4f} over {len(finals)} runs")
        return EXIT_OK
    except (NonFiniteError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, IDXError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (KeyError, TypeError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
