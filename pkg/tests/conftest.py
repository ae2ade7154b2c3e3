import pytest

from irmemory.asymptotics import McSpec, build_table, save_table

CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        CRITERIA[number] = line
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def small_table():
    """Coarse low-precision table for fast unit tests (p <= 6)."""
    return build_table(6, 0.098, McSpec(mc_samples=2 ** 11, n_scrambles=4))


@pytest.fixture(scope="session")
def small_table_path(small_table, tmp_path_factory):
    path = tmp_path_factory.mktemp("table") / "small.npz"
    save_table(small_table, path)
    return str(path)
