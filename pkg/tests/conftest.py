import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedsched.core import Client, Fleet, SystemConfig  # noqa: E402


def make_fleet(n=4, data=500.0, kappa=5e-27, p0=4e-7, gain=6.25e-14, f_min=1e7, f_max=5e9, rng=None, var=0.0):
    """Fleet with scalar or per-client parameters; `var` spreads them uniformly by +-var."""
    def col(v):
        arr = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
        if var and rng is not None:
            arr *= rng.uniform(1 - var, 1 + var, n)
        return arr

    d, k, p, g = col(data), col(kappa), col(p0), col(gain)
    d = np.round(d)
    q = d / d.sum()
    lo = np.broadcast_to(np.asarray(f_min, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(f_max, dtype=float), (n,))
    return Fleet.from_clients([Client(i, d[i], q[i], k[i], p[i], g[i], lo[i], hi[i]) for i in range(n)])


@pytest.fixture
def config():
    return SystemConfig()


@pytest.fixture
def fleet4():
    return make_fleet(4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
