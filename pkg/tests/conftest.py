import pytest

VERDICTS = []


def record(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS.append((criterion, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict():
    return record
