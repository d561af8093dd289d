"""Collects the acceptance verdicts and prints them after the test summary."""

import pytest

VERDICTS: list[str] = []
TABLES: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> None:
        VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        print(VERDICTS[-1])
        assert ok, VERDICTS[-1]

    return record


@pytest.fixture
def table():
    return TABLES.append


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS and not TABLES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
    for t in TABLES:
        terminalreporter.write_line("")
        terminalreporter.write_line(t)
