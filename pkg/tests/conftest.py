"""Collects acceptance outcomes and prints one line per criterion."""

from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            outcome = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if outcome == "SKIP" and not detail:
            detail = str(call.excinfo.value)
        _RESULTS[n] = (outcome, detail, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        outcome, detail, duration = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {outcome}  ({duration:.1f} s)  {detail}")
