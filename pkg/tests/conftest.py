import time
from contextlib import contextmanager

import pytest

_RESULTS: list[str] = []


@pytest.fixture
def criterion():
    """Time a numbered acceptance criterion and record one PASS/FAIL line for it."""

    @contextmanager
    def run(number: int, title: str, limit_s: float | None = None):
        t0 = time.perf_counter()
        status, note = "FAIL", ""
        try:
            yield
            elapsed = time.perf_counter() - t0
            if limit_s is not None and elapsed > limit_s:
                note = f" runtime {elapsed:.1f}s exceeds {limit_s:g}s"
                raise AssertionError(f"criterion {number}{note}")
            status = "PASS"
        except BaseException as e:
            note = note or f" ({type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''})"
            raise
        finally:
            elapsed = time.perf_counter() - t0
            line = f"{status} criterion {number}: {title} [{elapsed:.2f}s]{'' if status == 'PASS' else note}"
            _RESULTS.append(line)
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
