import numpy as np
import pytest

from msfusion.pyramid import Pyramid, build_pyramid

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pyramid(rng, h, w, c, n_scales, integer=False):
    """Independent random levels (not pooled), handy for fusion tests."""
    levels = []
    for k in range(n_scales):
        shape = (h >> k, w >> k, c)
        lvl = rng.integers(0, 2, shape).astype(float) if integer else rng.standard_normal(shape)
        levels.append(lvl)
    return Pyramid(tuple(levels))


def pooled_pyramid(rng, h, w, c, n_scales):
    return build_pyramid(rng.standard_normal((h, w, c)), n_scales)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
