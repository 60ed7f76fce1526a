import numpy as np
import pytest

from fedlora.config import ExperimentConfig, set_path
from fedlora.linalg import RngStream


def triple_loop_matmul(a, b):
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            s = 0.0
            for k in range(inner):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def central_difference(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def small_config(**overrides):
    """A configuration small enough for unit tests (a few hundred examples)."""
    cfg = ExperimentConfig()
    defaults = {
        "data.per_class": 60,
        "model.pretrain_epochs": 5,
        "federation.rounds": 2,
        "federation.local_epochs": 1,
    }
    defaults.update(overrides)
    for k, v in defaults.items():
        cfg = set_path(cfg, k, v)
    return cfg


@pytest.fixture
def rng():
    return RngStream(1234)


VERDICTS = []


def record_verdict(number, ok, detail):
    """Print and remember one acceptance line, then assert it."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    VERDICTS.append((number, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
