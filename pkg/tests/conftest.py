"""Collects the acceptance checklist lines and replays them after the run,
where capture cannot swallow them."""

checklist: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if checklist:
        terminalreporter.section("acceptance checklist")
        for line in checklist:
            terminalreporter.write_line(line)
