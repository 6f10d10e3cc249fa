import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            number = int(rep.nodeid.split("test_criterion_")[1].split("_")[0])
            verdict = props.get("verdict", "PASS" if rep.passed else "FAIL")
            lines.append((number, f"criterion {number}: {verdict}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
