import numpy as np
import pytest

from ncgmm import plant, policy, scenarios


@pytest.fixture
def model():
    return plant.default_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    cfg = scenarios.ScenarioConfig(n_train=48, n_dev=12, horizon=15)
    return scenarios.generate(cfg, seed=3)


@pytest.fixture
def small_policy():
    return policy.init_policy(1, 4, hidden=8, depth=2)


# -- acceptance report ---------------------------------------------------------
# test_acceptance.py appends "criterion N: PASS|FAIL ..." lines here; they are
# echoed immediately and repeated in the terminal summary.

ACCEPTANCE_LINES = []


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
