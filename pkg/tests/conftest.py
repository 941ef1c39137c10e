import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import ndimage

from multislice_tomo.core import ExperimentGeometry, Mode, ObjectVolume

# acceptance verdicts by criterion number, printed at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_volume(rng, n, scale=1e-6, smooth=False):
    d = rng.uniform(0.2, 1.0, (n, n, n)) * scale
    b = rng.uniform(0.2, 1.0, (n, n, n)) * scale * 0.1
    if smooth:
        d = ndimage.gaussian_filter(d, 1.0)
        b = ndimage.gaussian_filter(b, 1.0)
    return ObjectVolume(d, b, 1.0)


def fullfield_geometry(n, angles=(0.0,), distance=1000.0, **kw):
    return ExperimentGeometry(5.0, 1.0, distance, np.asarray(angles, dtype=float), n, **kw)


def ptycho_geometry(n, positions, angles=(0.0,), **kw):
    return ExperimentGeometry(5.0, 1.0, 0.0, np.asarray(angles, dtype=float), n, mode=Mode.PTYCHOGRAPHY,
                              probe_positions=positions, **kw)


def tie_free_volume(rng, n):
    """Random volume whose delta neighbours all differ by at least 3e-9.

    Finite differences with h = 1e-9 then never straddle a TV kink.
    """
    d = 2e-7 + 3e-9 * rng.permutation(n**3).reshape(n, n, n)
    b = rng.uniform(0.2, 1.0, (n, n, n)) * 1e-7
    return ObjectVolume(d, b, 1.0)


@contextmanager
def criterion(number, title):
    """Record one acceptance verdict; the body fills ``verdict["passed"]`` and ``verdict["detail"]``."""
    verdict = {"passed": False, "detail": ""}
    start = time.perf_counter()
    try:
        yield verdict
    except Exception as err:
        verdict["passed"] = False
        verdict["detail"] = f"error: {err!r}"
        raise
    finally:
        status = "PASS" if verdict["passed"] else "FAIL"
        line = f"criterion {number} {status} | {title} | {verdict['detail']} | {time.perf_counter() - start:.0f} s"
        ACCEPTANCE[number] = line
        print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
