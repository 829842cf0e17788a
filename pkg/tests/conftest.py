import pytest

from scenario import ScenarioConfig, generate_mvn_panel


@pytest.fixture
def correct_scenario():
    return ScenarioConfig(
        mu_case=[1.0, 1.1],
        cov_case=[[1.0, 0.2], [0.2, 1.0]],
        cov_control=[[1.0, 0.2], [0.2, 1.0]],
        n_cases=200,
        n_controls=200,
        name="correct",
    )


@pytest.fixture
def strong_scenario():
    return ScenarioConfig(
        mu_case=[0.8, 2.0],
        cov_case=[[1.0, 0.2], [0.2, 1.0]],
        cov_control=[[1.0, 0.1], [0.1, 1.0]],
        n_cases=200,
        n_controls=200,
        name="strong",
    )


@pytest.fixture
def panel(correct_scenario):
    return generate_mvn_panel(correct_scenario, 11)


@pytest.fixture
def strong_panel(strong_scenario):
    return generate_mvn_panel(strong_scenario, 7)
