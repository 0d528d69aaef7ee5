import pytest
import torch

torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, when any ran."""
    lines = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and "::test_c" in nodeid:
                if getattr(rep, "when", "call") != "call" and status == "passed":
                    continue
                name = nodeid.split("::")[-1].removeprefix("test_")
                verdict = "PASS" if status == "passed" else "FAIL"
                if lines.get(name) != "FAIL":
                    lines[name] = verdict
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"{name}: {lines[name]}")
