import numpy as np
import pytest

from gazerace.sim import load_track


@pytest.fixture(scope="session")
def figure8():
    return load_track("figure8")


@pytest.fixture(scope="session")
def oval():
    return load_track("oval")


@pytest.fixture(scope="session")
def fig8_reference(figure8):
    from gazerace.expert.reference import generate_reference

    return generate_reference(figure8, 5.0)


@pytest.fixture(scope="session")
def expert_lap(figure8, fig8_reference):
    """One MPC lap on the figure-eight (shared by several modules' tests)."""
    from gazerace.expert.mpc import MpcExpert
    from gazerace.sim import run_rollout

    return run_rollout(MpcExpert(fig8_reference), figure8, fig8_reference, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance summary

ACCEPTANCE_DETAILS = {}
ACCEPTANCE_OUTCOMES = {}


@pytest.fixture
def report(request):
    """Append a measured value to the acceptance summary line of the running test."""
    return lambda text: ACCEPTANCE_DETAILS.setdefault(request.node.name, []).append(text)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        name = report.nodeid.rsplit("::", 1)[-1]
        if report.when == "call" or name not in ACCEPTANCE_OUTCOMES:
            ACCEPTANCE_OUTCOMES[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_OUTCOMES):
        label = name.split("_")[1].upper()
        verdict = "PASS" if ACCEPTANCE_OUTCOMES[name] == "passed" else "FAIL"
        detail = "; ".join(ACCEPTANCE_DETAILS.get(name, []))
        terminalreporter.write_line(f"{label} {verdict}  {detail}")
