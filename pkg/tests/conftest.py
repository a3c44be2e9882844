"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

import pytest

_RESULTS: dict[str, list[tuple[bool, str]]] = {}


class AcceptanceLog:
    def record(self, criterion: str, passed: bool, detail: str) -> None:
        _RESULTS.setdefault(criterion, []).append((bool(passed), detail))


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_RESULTS):
        checks = _RESULTS[criterion]
        ok = all(p for p, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
