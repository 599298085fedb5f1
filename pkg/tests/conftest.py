import pytest

from vird.config import RunConfig
from vird.synthdata import SynthParams, generate_dataset


@pytest.fixture(scope="session")
def small_pairs():
    return generate_dataset(42, 8, SynthParams())


@pytest.fixture
def small_config():
    cfg = RunConfig()
    cfg.train.epochs = 1
    cfg.train.test_grid = 4
    cfg.train.test_ntheta = 16
    return cfg


_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion; returns the verdict."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[name] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        passed, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
