import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and not (rep.when == "setup" and rep.failed):
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                rows.append((props["criterion"], "PASS" if rep.passed else "FAIL", props.get("measured", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for crit, verdict, measured in sorted(rows, key=lambda r: int(r[0].split()[0])):
            terminalreporter.write_line(f"{verdict}  {crit}: {measured}")
