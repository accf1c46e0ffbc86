import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number (or example name) -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (isinstance(k, str), k if isinstance(k, int) else 0, str(k))):
        ok, detail = ACCEPTANCE[key]
        label = f"criterion {key}" if isinstance(key, int) else key
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
