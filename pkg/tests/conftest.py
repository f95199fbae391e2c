import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """``verdict(k, checks)``: print and record one PASS/FAIL line for criterion ``k``, then assert.

    ``checks`` is a list of ``(description, ok)`` pairs.
    """

    def record(k, checks):
        failed = [d for d, ok in checks if not ok]
        status = "FAIL" if failed else "PASS"
        detail = "; ".join(d for d, _ in checks)
        line = f"criterion {k}: {status}  {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert not failed, "failed: " + "; ".join(failed)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: s.split(":")[0]):
            terminalreporter.write_line(line)
