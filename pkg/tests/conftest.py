import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {c}: {detail}")
