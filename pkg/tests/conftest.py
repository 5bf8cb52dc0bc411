"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_STARTED: set[int] = set()


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def started(number: int) -> None:
    _STARTED.add(number)


def pytest_terminal_summary(terminalreporter):
    if not _STARTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_STARTED):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
