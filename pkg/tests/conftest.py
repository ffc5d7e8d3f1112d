"""Shared test plumbing: collects acceptance-criterion result lines.

Each acceptance test reports one PASS/FAIL line through the
``criterion_report`` fixture; the lines are echoed both immediately
(visible on failure) and in a summary section at the end of the run.
"""

import pytest

_criterion_lines: list[str] = []


@pytest.fixture(scope="session")
def criterion_report():
    def _report(number: int, name: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number} ({name}): {status}"
        if detail:
            line += f" — {detail}"
        _criterion_lines.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
