import pytest

from kronaem import build_benchmark, dense_reference

_CRITERIA = []


@pytest.fixture(scope="session")
def exp1_desk():
    problem = build_benchmark("exp1", 4, 5, 3)
    return problem, dense_reference(problem)


@pytest.fixture(scope="session")
def exp2_desk():
    problem = build_benchmark("exp2", 4, 5, 3)
    return problem, dense_reference(problem)


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def record(number, ok, detail):
        _CRITERIA.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_CRITERIA, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
