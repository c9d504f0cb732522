import pytest

import desk


@pytest.fixture(scope="session")
def desk_run():
    """Linear-decoder model trained at desk scale on the simulated linear state-space panel."""
    return desk.train_linear("linear")


@pytest.fixture(scope="session")
def desk_nonlinear_run():
    """Same data and budget with the MLP decoder, for the decoder ablation."""
    return desk.train_linear("mlp")


@pytest.fixture(scope="session")
def seasonal_run():
    return desk.train_seasonal()


def pytest_terminal_summary(terminalreporter):
    if not desk.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(desk.ACCEPTANCE):
        passed, detail = desk.ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
