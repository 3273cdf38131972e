import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Context manager factory that records one PASS/FAIL line per acceptance criterion."""

    class _Record:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"criterion {self.number}: {status}  {self.title}"
            if self.detail:
                line += f"  [{self.detail}]"
            ACCEPTANCE.append((self.number, line))
            print(line)
            return False

    return _Record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
