import functools
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from tdcoord.hgd import AffineCoordinatedProblem  # noqa: E402
from tdcoord.model import bundled_case  # noqa: E402

settings.register_profile("fast", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("fast")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


@functools.lru_cache(maxsize=None)
def case(name: str):
    return bundled_case(name)


@pytest.fixture
def load():
    return case


def affine_half(**kw) -> AffineCoordinatedProblem:
    """Two-scalar affine coupling whose sweep matrix has spectral radius exactly 0.5."""
    M = np.eye(2)
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    return AffineCoordinatedProblem(M, A, a0=np.array([1.0, 2.0]), **kw)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
