import pytest

_criteria: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance criterion outcome: criterion(n, ok, detail)."""

    def record(number: int, ok: bool, detail: str) -> None:
        _criteria[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
