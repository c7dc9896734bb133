import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and echo it immediately."""

    def emit(label: str, passed: bool, detail: str = "", advisory: bool = False) -> bool:
        status = "PASS" if passed else ("MISS (advisory)" if advisory else "FAIL")
        line = f"[{status}] {label}" + (f" -- {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
