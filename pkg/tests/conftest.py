import pytest

_verdicts: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a one-line pass/fail summary for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _verdicts[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_verdicts):
            terminalreporter.write_line(_verdicts[n])
