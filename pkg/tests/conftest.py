import numpy as np
import pytest

from mmqrl.matching import MatchIndex
from mmqrl.motion_db import GaitConfig, build_feature_database, generate_synthetic_locomotion


@pytest.fixture(scope="session")
def clips():
    return generate_synthetic_locomotion(GaitConfig(minutes=10.0), 1)


@pytest.fixture(scope="session")
def db(clips):
    return build_feature_database(clips)


@pytest.fixture(scope="session")
def index(db):
    return MatchIndex(db)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report -----------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> bool:
    """Record one acceptance criterion; the summary is printed at the end of the session."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
