import numpy as np
import pytest

from fedunfold.data import PartitionSpec, partition, synth_blobs
from fedunfold.fedsim import ClientProfile, FedConfig


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def tiny_clients():
    """K = 2 clients, 8 samples each, 4 features, 2 classes."""
    pool = synth_blobs(2, 4, 8, 1.0, seed=0)
    return partition(pool, PartitionSpec("quantity-skew", sizes=[8, 8], seed=1))


@pytest.fixture
def tiny_fed():
    return FedConfig(layer_sizes=(4, 4, 2), rounds=2, lr=0.5, batch_size=8)


@pytest.fixture
def tiny_profiles(tiny_clients):
    return [ClientProfile(c.n, epochs=1) for c in tiny_clients]


@pytest.fixture
def small_env():
    """Three label-skewed clients on 3-class blobs with a balanced test set."""
    from fedunfold.data import train_test_split

    pool = synth_blobs(3, 6, 60, 1.0, seed=3)
    train, test = train_test_split(pool, 20, seed=3)
    clients = partition(
        train, PartitionSpec("label-skew", sizes=[30, 30, 20], label_sets=[[0, 1], [0, 1], [1, 2]], seed=3)
    )
    profiles = [ClientProfile(c.n, epochs=2) for c in clients]
    fed = FedConfig(layer_sizes=(6, 8, 8, 3), rounds=4, lr=0.2, batch_size=10, seed=5)
    return clients, profiles, fed, test


# acceptance reporting: one summary line per criterion

_CRITERIA: dict[int, dict] = {}
_STATUS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "parts": [], "details": []})
    entry["parts"].append(_STATUS[rep.outcome])
    if rep.outcome == "skipped":
        entry["details"].append(str(rep.longrepr[-1]).removeprefix("Skipped: "))
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        parts = set(e["parts"])
        if "FAIL" in parts:
            status = "FAIL"
        elif parts == {"SKIP"}:
            status = "SKIP"
        elif "SKIP" in parts:
            status = "PARTIAL"
        else:
            status = "PASS"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] {n}. {e['title']}" + (f" ({detail})" if detail else ""))
