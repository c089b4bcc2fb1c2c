"""Shared test infrastructure: acceptance-criterion result reporting.

Criterion tests register one line each; the terminal summary prints them all
so every run shows an explicit pass/fail line per acceptance criterion.
"""

_CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _CRITERIA.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)
