import numpy as np
import pytest

from mvhmr.engine import EngineConfig, ViewContext
from mvhmr.scenario import ScenarioConfig, generate_scenario, template_for, TemplateConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def template():
    return template_for(TemplateConfig())


@pytest.fixture(scope="session")
def scenario():
    return generate_scenario(ScenarioConfig(), seed=3)


@pytest.fixture(scope="session")
def pyramids(scenario):
    return scenario.pyramids()


@pytest.fixture
def ctx(scenario, pyramids):
    return ViewContext(scenario.template, scenario.cams, pyramids, EngineConfig())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
