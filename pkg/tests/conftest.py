"""Collects acceptance results and prints one PASS/FAIL line per criterion at the end of the run."""

from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one sub-check of acceptance criterion ``n``."""

    def _record(n: int, ok: bool, detail: str) -> bool:
        _RESULTS[n].append((bool(ok), detail))
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        checks = _RESULTS[n]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        detail = "; ".join(("" if ok else "FAILED ") + d for ok, d in checks)
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
