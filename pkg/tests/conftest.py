import _verdicts


def pytest_terminal_summary(terminalreporter):
    if _verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts.LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
