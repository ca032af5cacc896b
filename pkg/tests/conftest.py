import pytest

from chroma import tensor as T

_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(n, ok, detail)``; fails the test when ``ok`` is false."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(autouse=True)
def _reset_precision():
    yield
    T.set_dtype("float32")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
