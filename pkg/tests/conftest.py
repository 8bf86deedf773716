import numpy as np
import pytest

from fetomosaic.synth import make_sequence

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
_ACCEPTANCE = {}
_CRITERIA = [f"AC{k}" for k in range(1, 10)]


@pytest.fixture(scope="session")
def short_seq():
    """A clean 12-frame 448x448 synthetic sequence shared across modules."""
    return make_sequence(12, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance():
    def record(cid, passed, detail):
        _ACCEPTANCE[cid] = (bool(passed), detail)
        print(f"{cid} {'PASS' if passed else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for key in ("passed", "failed", "error")
              for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for cid in _CRITERIA:
        passed, detail = _ACCEPTANCE.get(cid, (False, "no result recorded"))
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'}: {detail}")
