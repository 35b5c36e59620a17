import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion.

    Lines are printed immediately (visible with -s) and echoed in the
    terminal summary so they show up in a default captured run too.
    """

    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        line = f"ACCEPTANCE {number:02d} {name}: {'PASS' if passed else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE_LINES.append(line)
        print(line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
