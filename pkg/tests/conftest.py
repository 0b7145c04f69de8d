import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """``check = criterion(n)`` then ``check(ok, detail)``; one summary line per criterion."""
    opened = []

    def start(n):
        opened.append(n)
        _RESULTS[n] = (False, "did not complete")

        def check(ok, detail):
            _RESULTS[n] = (bool(ok), detail)
            assert ok, f"criterion {n}: {detail}"

        return check

    yield start


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
