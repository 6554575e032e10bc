import numpy as np
import pytest
from scipy.stats import special_ortho_group

from netparafac.cp import CpModel


def random_model(dims, rank, seed=0, dist="gauss"):
    rng = np.random.default_rng(seed)
    draw = rng.standard_normal if dist == "gauss" else rng.random
    return CpModel(*(draw((d, rank)) for d in dims))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def simplex_blobs(k, n=40, d=9, sep=10.0, seed=0):
    """``k`` unit-noise blobs whose centres are pairwise equidistant.

    The centres are a scaled simplex under a random rotation, so every
    coordinate carries signal after per-column standardization.
    """
    rng = np.random.default_rng(seed)
    centres = sep * np.eye(k, d) @ special_ortho_group.rvs(d, random_state=rng)
    x = np.vstack([c + rng.standard_normal((n, d)) for c in centres])
    return x, np.repeat(np.arange(k), n)
