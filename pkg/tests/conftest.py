import numpy as np
import pytest

from fzsl.data import SyntheticSpec, make_synthetic
from fzsl.rng import RngStream


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture
def small_dataset():
    """25 classes (20 seen / 5 unseen), m=16, d=32, 50 rows per class."""
    return make_synthetic(SyntheticSpec(), RngStream(0, ("fixture",)))


@pytest.fixture
def tiny_dataset():
    spec = SyntheticSpec(seen_count=8, unseen_count=3, attr_dim=4, feature_dim=6, rows_per_class=10)
    return make_synthetic(spec, RngStream(1, ("tiny",)))


def rel_err(analytic, numeric, floor=1e-5):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def central_difference(f, arrays, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of every array (in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
