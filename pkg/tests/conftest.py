"""Shared pytest wiring for the suite."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # default capture swallows the per-test "criterion N: PASS" prints;
    # replay them after the run so a plain -v log still ends with the
    # checklist (under -s nothing is captured and this block is empty)
    lines = set()
    for rep in terminalreporter.stats.get("passed", ()):
        for line in (rep.capstdout or "").splitlines():
            if line.startswith("criterion ") and line.endswith(": PASS"):
                lines.add(line)
    if lines:
        terminalreporter.section("acceptance checklist")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
