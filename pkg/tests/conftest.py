"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

from __future__ import annotations

import re

_CRITERION = re.compile(r"test_(a\d+)_")
_outcomes: dict[str, list[str]] = {}
_notes: dict[str, str] = {}


def record_note(criterion: str, text: str) -> None:
    _notes[criterion.upper()] = text


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid.split("::")[-1])
    if not m or "test_acceptance" not in report.nodeid:
        return
    key = m.group(1).upper()
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(key, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: int(k[1:])):
        ok = all(o == "passed" for o in _outcomes[key])
        note = f"  ({_notes[key]})" if key in _notes else ""
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}{note}")
