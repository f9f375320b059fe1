import time
from contextlib import contextmanager

import pytest

# (number, title, passed, seconds, budget, note)
_ACCEPTANCE: list[tuple] = []


class _Criterion:
    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.note = ""


@pytest.fixture
def criterion():
    """Time a block, assert its budget, and log one summary line."""

    @contextmanager
    def run(number: int, title: str, budget: float):
        c = _Criterion(number, title, budget)
        start = time.perf_counter()
        ok = False
        try:
            yield c
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            within = elapsed < budget
            _ACCEPTANCE.append((number, title, ok and within, elapsed, budget, c.note))
        assert within, f"criterion {number} took {elapsed:.1f}s, budget {budget:.0f}s"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, elapsed, budget, note in sorted(_ACCEPTANCE):
        status = "PASS" if ok else "FAIL"
        extra = f"  [{note}]" if note else ""
        terminalreporter.write_line(f"{status}  {number:>2}. {title} ({elapsed:.2f}s / {budget:.0f}s){extra}")
