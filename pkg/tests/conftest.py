"""Shared pytest plumbing.

The acceptance suite reports one line per numbered criterion; the hook below
prints them as a dedicated section at the end of the run so the verdicts stay
visible even in long -v output.
"""

_CRITERION_LINES: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    _CRITERION_LINES.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERION_LINES):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} [{status}] {title}: {detail}")
