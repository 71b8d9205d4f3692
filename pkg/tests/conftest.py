from __future__ import annotations

import criteria


def pytest_terminal_summary(terminalreporter):
    if not criteria.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in criteria.summary_lines():
        terminalreporter.write_line(line)
