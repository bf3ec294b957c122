import pytest

_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records the verdict of acceptance criterion ``k``."""

    def record(k: int, ok: bool, detail: str = "") -> bool:
        _RESULTS[k] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        ok, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
