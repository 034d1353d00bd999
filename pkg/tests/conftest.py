"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
import pytest

_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    def record(number: int, title: str, ok: bool, detail: str = ""):
        _VERDICTS[number] = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        print(_VERDICTS[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
