import pytest

from nnmerge import Domain, sample_artificial


@pytest.fixture(scope="session")
def unit8():
    return Domain(extent=(1.0, 1.0, 1.0), shape=(8, 8, 8))


@pytest.fixture(scope="session")
def pop8(unit8):
    return sample_artificial(unit8, 40, 11)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
