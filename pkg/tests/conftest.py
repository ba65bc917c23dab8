# filled by tests/test_acceptance.py: (criterion id, passed, detail)
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda x: int(x[0].split(".")[0])):
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}")
