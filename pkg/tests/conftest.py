"""Prints one pass/fail line per acceptance criterion at the end of a run."""

import re


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome, reports in terminalreporter.stats.items():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", nodeid)
            when = getattr(rep, "when", None)
            if not m or when not in ("call", "setup"):
                continue
            if when == "setup" and outcome == "passed":
                continue
            detail = "; ".join(str(v) for k, v in getattr(rep, "user_properties", []) if k == "detail")
            rows[int(m.group(1))] = ("PASS" if outcome == "passed" else outcome.upper().replace("FAILED", "FAIL"),
                                     detail)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        status, detail = rows[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {detail}")
