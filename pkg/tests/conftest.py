import warnings

import pytest

from revman import estimation as E
from revman import synthetic as S


@pytest.fixture(scope="session")
def full_world():
    """One synthetic world at full scale (2,909 trains, K = 12)."""
    return S.generate(S.SyntheticConfig(seed=3))


@pytest.fixture(scope="session")
def full_panel(full_world):
    return E.SalesPanel.from_world(full_world)


@pytest.fixture(scope="session")
def full_estimates(full_panel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return E.estimate(full_panel)


_CRITERIA: dict = {}


@pytest.fixture
def criterion(capsys):
    """``criterion(n, passed, detail)`` records a PASS/FAIL line for the summary."""

    def record(n: int, passed: bool, detail: str = "", table: str = ""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {n:2d}: {detail}"
        _CRITERIA[n] = (line, table)
        with capsys.disabled():
            print("\n" + line + ("\n" + table if table else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        line, table = _CRITERIA[n]
        terminalreporter.write_line(line)
        for row in table.splitlines():
            terminalreporter.write_line("    " + row)
