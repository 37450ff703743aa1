import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from fedunfold.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from fedunfold.unfolding import WeightSchedule


def _config(tmp_path, **over):
    cfg = {
        "seed": 4,
        "dataset": {"source": "synth", "classes": 3, "dims": 5, "per_class": 20, "test_per_class": 6, "spread": 1.0},
        "partition": {"scheme": "label-skew", "sizes": [15, 15, 10], "label_sets": [[0, 1], [0, 1], [1, 2]]},
        "clients": {"epochs": 1},
        "fed": {"hidden": [6], "rounds": 3, "lr": 0.2, "batch_size": 5},
        "strategy": {"name": "fedavg"},
        "meta": {"iterations": 3, "meta_lr": 0.05},
        "repeat": 2,
        "output_dir": "out",
    }
    for k, v in over.items():
        cfg[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _files(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_partition_outputs(tmp_path):
    cfg = _config(tmp_path)
    assert main(["partition", str(cfg)]) == EXIT_OK
    out = tmp_path / "out" / "partition"
    rows = _rows(out / "histogram.csv")
    assert rows[0] == ["client", "class", "count"]
    assert len(rows) == 1 + 3 * 3
    counts = {(int(r[0]), int(r[1])): int(r[2]) for r in rows[1:]}
    assert counts[(2, 0)] == 0 and counts[(0, 2)] == 0
    with np.load(out / "client_2.npz") as z:
        assert z["inputs"].shape == (10, 5)
        assert set(z["labels"].tolist()) <= {1, 2}


def test_reruns_are_byte_identical(tmp_path, monkeypatch):
    cfg = _config(tmp_path, strategy={"name": "duw"})
    snaps = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        monkeypatch.setenv("FEDUNFOLD_OUTPUT_DIR", str(d))
        for cmd in ("partition", "train-weights", "run"):
            assert main([cmd, str(cfg)]) == EXIT_OK
        snaps.append(_files(d))
    assert snaps[0].keys() == snaps[1].keys()
    assert "schedule.csv" in snaps[0] and "trace_1.csv" in snaps[0]
    for k in snaps[0]:
        assert snaps[0][k] == snaps[1][k], k


def test_seed_flag_changes_outputs(tmp_path, monkeypatch):
    cfg = _config(tmp_path)
    outs = []
    for seed in (1, 2):
        d = tmp_path / f"s{seed}"
        monkeypatch.setenv("FEDUNFOLD_OUTPUT_DIR", str(d))
        assert main(["run", str(cfg), "--seed", str(seed)]) == EXIT_OK
        outs.append((d / "trace_0.csv").read_bytes())
    assert outs[0] != outs[1]


def test_zero_iterations_schedule_is_data_weights(tmp_path):
    cfg = _config(tmp_path, meta={"iterations": 0})
    assert main(["train-weights", str(cfg)]) == EXIT_OK
    sched = WeightSchedule.from_csv((tmp_path / "out" / "schedule.csv").read_text())
    np.testing.assert_allclose(sched.weights, np.tile([15 / 40, 15 / 40, 10 / 40], (3, 1)), atol=1e-12)
    header = json.loads((tmp_path / "out" / "schedule.json").read_text())
    assert header["T"] == 3 and header["K"] == 3 and len(header["config_hash"]) == 16
    assert _rows(tmp_path / "out" / "meta_loss.csv") == [["iteration", "meta_loss"]]


def test_repeat_ten_gives_eleven_rows(tmp_path):
    cfg = _config(tmp_path, repeat=10, fed={"hidden": [], "rounds": 1, "lr": 0.1, "batch_size": 40})
    assert main(["run", str(cfg)]) == EXIT_OK
    rows = _rows(tmp_path / "out" / "accuracy.csv")
    assert rows[0] == ["repeat", "accuracy", "std"]
    assert len(rows) == 1 + 11
    accs = [float(r[1]) for r in rows[1:11]]
    assert rows[-1][0] == "summary"
    assert float(rows[-1][1]) == pytest.approx(np.mean(accs))
    assert float(rows[-1][2]) == pytest.approx(np.std(accs))


def test_run_with_explicit_schedule(tmp_path):
    cfg = _config(tmp_path, strategy={"name": "duw"}, repeat=1)
    sched = WeightSchedule(np.log(np.full((3, 3), 1 / 3)))
    sp = tmp_path / "u.csv"
    sp.write_text(sched.to_csv())
    assert main(["run", str(cfg), "--schedule", str(sp)]) == EXIT_OK
    rows = _rows(tmp_path / "out" / "trace_0.csv")
    assert rows[0] == ["round", "client", "weight", "loss", "available"]
    assert float(rows[1][2]) == pytest.approx(1 / 3)
    bad = tmp_path / "bad.csv"
    bad.write_text(WeightSchedule(np.zeros((2, 3))).to_csv())
    assert main(["run", str(cfg), "--schedule", str(bad)]) == EXIT_CONFIG


@pytest.mark.parametrize("strategy", ["dr", "fedadp", "fedfa", "fednova"])
def test_baseline_strategies_run(tmp_path, strategy):
    fed = {"hidden": [4], "rounds": 2, "lr": 0.2, "batch_size": 5}
    if strategy == "fednova":
        fed["algorithm"] = "fednova"
    cfg = _config(tmp_path, strategy={"name": strategy}, repeat=1, fed=fed,
                  clients={"epochs": [2, 1, 1], "comm_prob": [0.5, 1.0, 1.0]})
    assert main(["run", str(cfg)]) == EXIT_OK


def test_config_errors(tmp_path):
    assert main(["run", str(_config(tmp_path, fed={"hidden": [], "momentum": 0.9}))]) == EXIT_CONFIG
    assert main(["run", str(_config(tmp_path, strategy={"name": "krum"}))]) == EXIT_CONFIG
    assert main(["run", str(_config(tmp_path, partition={"scheme": "quantity-skew", "sizes": [100, 100]}))]) == EXIT_CONFIG
    assert main(["run", str(_config(tmp_path, clients={"comm_prob": [0.5, 0.5]}))]) == EXIT_CONFIG
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == EXIT_CONFIG


def test_io_errors(tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_IO
    img = tmp_path / "img"
    img.write_bytes(struct.pack(">4I", 0x802, 1, 28, 28) + bytes(784))
    lab = tmp_path / "lab"
    lab.write_bytes(struct.pack(">2I", 0x801, 1) + b"\x00")
    cfg = _config(tmp_path, dataset={"source": "idx", "train_images": "img", "train_labels": "lab"})
    assert main(["partition", str(cfg)]) == EXIT_IO


def test_numeric_failure(tmp_path):
    cfg = _config(tmp_path, fed={"hidden": [6], "rounds": 3, "lr": 1e200, "batch_size": 5},
                  meta={"iterations": 2})
    assert main(["train-weights", str(cfg)]) == EXIT_NUMERIC
    assert main(["run", str(cfg)]) == EXIT_NUMERIC


def _write_schedules(tmp_path, fn):
    paths = []
    for T in (4, 8, 16):
        W = fn(T)
        p = tmp_path / f"s{T}.csv"
        p.write_text(WeightSchedule(np.log(W)).to_csv())
        paths.append(p.name)
    return paths


def test_analyze_power_law(tmp_path):
    def fn(T):
        # alternate +-d around 0.5 with d^2 = 0.1 / T, so the variance is exactly 0.1 / T
        d = np.sqrt(0.1 / T)
        col = 0.5 + d * np.array([(-1) ** t for t in range(T)])
        return np.stack([col, 1 - col], axis=1)

    cfg = {"schedules": _write_schedules(tmp_path, fn), "a_vectors": {"tau": 3}, "output_dir": "an"}
    cp = tmp_path / "an.json"
    cp.write_text(json.dumps(cfg))
    assert main(["analyze", str(cp)]) == EXIT_OK
    slope = float((tmp_path / "an" / "slope.txt").read_text().split()[1])
    assert slope == pytest.approx(-1.0, abs=1e-6)
    rows = _rows(tmp_path / "an" / "variance.csv")
    assert rows[0] == ["T", "mean_variance"]
    assert [int(r[0]) for r in rows[1:]] == [4, 8, 16]
    co = _rows(tmp_path / "an" / "coefficients.csv")
    assert co[0] == ["Atilde", "Btilde", "Ctilde", "tau_eff"]
    assert float(co[1][1]) == pytest.approx(2.0)
    assert float(co[1][2]) == pytest.approx(6.0)


def test_analyze_rejects_constant_schedules(tmp_path, caplog):
    cfg = {"schedules": _write_schedules(tmp_path, lambda T: np.full((T, 2), 0.5)), "output_dir": "an"}
    cp = tmp_path / "an.json"
    cp.write_text(json.dumps(cfg))
    assert main(["analyze", str(cp)]) == EXIT_CONFIG
    assert "zero variance" in (tmp_path / "an" / "slope.txt").read_text()
