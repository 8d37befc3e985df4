"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from __future__ import annotations

_OUTCOMES: dict[int, list[tuple[bool, float]]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    # a failed setup never reaches the call phase
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(number, []).append((report.passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        runs = _OUTCOMES[number]
        ok = all(passed for passed, _ in runs)
        seconds = sum(d for _, d in runs)
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status} ({len(runs)} checks, {seconds:.1f} s)")
