"""Collects one verdict line per acceptance criterion and prints them after the run."""
import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def verdict():
    def record(key: str, ok: bool, detail: str) -> bool:
        _VERDICTS[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[key])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(_VERDICTS[key])
