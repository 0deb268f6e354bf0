"""Scoreboard for the release gate: acceptance tests record one line each and
the summary block prints them after the run."""

import pytest

_FORMAL = {}


def record_criterion(num: int, name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    line = f"criterion {num:2d} {tag}  {name}"
    if detail:
        line += f"  [{detail}]"
    _FORMAL[num] = line


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _FORMAL:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_FORMAL):
        terminalreporter.write_line(_FORMAL[num])
