import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def loop_conv(x, w, b, stride, padding, relu):
    """Direct nested-loop convolution in float64; independent of im2col."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for f in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = float(b[f])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += float(w[f, ci, i, j]) * xp[ni, ci, y * stride + i,
                                                                  xx * stride + j]
                    out[ni, f, y, xx] = max(acc, 0.0) if relu else acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
