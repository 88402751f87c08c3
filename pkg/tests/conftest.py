import pytest

from entropic_liquidation import illustration_params

# filled by test_acceptance; echoed in the terminal summary so the per-criterion
# lines survive output capturing
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def base():
    return illustration_params()


@pytest.fixture(params=[0.0, 0.1, 0.5, 0.9], ids=lambda r: f"rho={r}")
def rho_params(request):
    return illustration_params(rho=request.param)
