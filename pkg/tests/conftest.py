import pytest

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record_criterion():
    """Register a PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str, status: str | None = None) -> None:
        status = status or ("PASS" if ok else "FAIL")
        line = f"{status} criterion {number:>2}: {detail}"
        ACCEPTANCE[number] = (status, line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number][1])
