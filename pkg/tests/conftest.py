import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_index_pairs(queries, points, R):
    """O(N^2) reference: arrays (q, i) of every pair with |p_i - q| < R in float64, row-major order."""
    q = np.asarray(queries, np.float64)
    p = np.asarray(points, np.float64)
    d = q[:, None, :] - p[None, :, :]
    d2 = d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2
    return np.nonzero(d2 < R * R)


def brute_pairs(queries, points, R):
    """Set form of :func:`brute_index_pairs`."""
    qi, pi = brute_index_pairs(queries, points, R)
    return set(zip(qi.tolist(), pi.tolist()))


# one "criterion N: PASS|FAIL ..." line per acceptance criterion, printed after the run
CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Recorder ``criterion(n, ok, detail)``; a test that dies before recording is logged as FAIL."""
    seen = []

    def record(n, ok, detail):
        seen.append(n)
        CRITERIA.setdefault(n, []).append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        print(CRITERIA[n][-1])
        return ok

    yield record
    if not seen:
        n = int(request.node.name.split("_")[1][1:])
        CRITERIA.setdefault(n, []).append(f"criterion {n}: FAIL did not complete ({request.node.name})")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        for line in CRITERIA[n]:
            terminalreporter.write_line(line)
