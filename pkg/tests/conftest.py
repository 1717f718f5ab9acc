"""Shared fixtures: the bundled feeder, the pretrained estimator, and the
four canonical scenario runs (attack case 1 and 2, defense off and on).

Everything heavy is session-scoped so the engine and acceptance tests share
one set of closed-loop runs instead of re-simulating per test.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from importlib import resources

import pytest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from voltvarsim.defense_ann import Detector, measurement_layout, model_from_json
from voltvarsim.grid_model import load_network, scale_loads
from voltvarsim.sim_engine import ScenarioConfig, run, scenario_from_doc


def _data_text(name: str) -> str:
    return (resources.files("voltvarsim") / "data" / name).read_text()


def scenario_config(case: str, defense: bool) -> ScenarioConfig:
    """The packaged scenario file with the defense toggled."""
    config = scenario_from_doc(tomllib.loads(_data_text(f"{case}.toml")), base="")
    return replace(config, defense_enabled=defense)


@pytest.fixture(scope="session")
def ieee13():
    """The bundled 13-bus feeder at nominal (factor 1.0) loading."""
    return load_network(_data_text("ieee13.model"))


@pytest.fixture(scope="session")
def ieee13_half(ieee13):
    """The feeder at the scenarios' loading factor of 0.5."""
    return scale_loads(ieee13, 0.5)


@pytest.fixture(scope="session")
def detector(ieee13_half):
    """The bundled pretrained estimator bound to the 13-bus layout."""
    return Detector(
        model_from_json(_data_text("ieee13-ann.json")),
        measurement_layout(ieee13_half),
    )


@pytest.fixture(scope="session")
def run1_off():
    return run(scenario_config("scenario1", defense=False))


@pytest.fixture(scope="session")
def run1_on(detector):
    return run(scenario_config("scenario1", defense=True), detector=detector)


@pytest.fixture(scope="session")
def run2_off():
    return run(scenario_config("scenario2", defense=False))


@pytest.fixture(scope="session")
def run2_on(detector):
    return run(scenario_config("scenario2", defense=True), detector=detector)
