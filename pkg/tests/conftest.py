import numpy as np
import pytest
import torch

from adaptive_semcom.data import ensure_dataset
from adaptive_semcom.link import SemComSystem, SystemConfig


@pytest.fixture(scope="session")
def data_root():
    return ensure_dataset()


@pytest.fixture
def small_system():
    """Narrow float64 model for exact numeric checks."""
    torch.manual_seed(0)
    return SemComSystem(SystemConfig(width=16, policy_hidden=16)).double()


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (8, 3, 32, 32))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str = ""):
    """Store and print one pass/fail line for an acceptance criterion."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
