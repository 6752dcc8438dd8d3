import pytest

from tedsim.circuit import CircuitParams


@pytest.fixture
def table_params():
    return CircuitParams(E_Jd=8.7, E_Jc=13.0, E_Jw=26.0, E_Jcw=2.2,
                         C_d=121.0, C_c=112.0, C_w=110.0, C_dc=3.8, C_cw=7.0, C_v=4.5)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
