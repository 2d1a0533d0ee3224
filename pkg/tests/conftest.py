import sys

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    sys.__stdout__.write(f"\nCRITERION {criterion:>2} {'PASS' if ok else 'FAIL'}: {detail}\n")
    sys.__stdout__.flush()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
