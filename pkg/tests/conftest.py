import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record a named pass/fail line for the end-of-run acceptance summary."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(name: str, ok: bool, detail: str = "") -> bool:
        store[name] = (bool(ok), detail)
        print(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance summary")
    for name in sorted(store):
        ok, detail = store[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
