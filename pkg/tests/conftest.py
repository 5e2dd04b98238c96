"""
Shared fixtures: scenarios small enough for unit tests plus the noiseless presets
"""
import os
from pathlib import Path

import pytest

# Keep the edge status line off stdout during tests
os.environ.setdefault("EDGEBOT_ENABLE_STATUS_LINE", "false")

from edgebot.models.schemas import ImuNoiseModel, RttNoiseModel, ScenarioConfig  # noqa: E402
from edgebot.services.simulator import build_scenario, preset_config  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent

EXP1_APS = [(0.5, 0.5), (9.5, 1.5), (6.0, 4.5), (1.5, 4.5)]


def quiet_noise():
    return dict(
        imu_noise=ImuNoiseModel.noiseless(),
        rtt_noise=RttNoiseModel.noiseless(),
    )


@pytest.fixture
def root_dir() -> Path:
    return ROOT


@pytest.fixture(scope="session")
def config_dir() -> Path:
    return ROOT / "config"


@pytest.fixture
def quiet_exp1():
    """The exp1 preset with every noise source switched off"""
    return build_scenario(preset_config("exp1", **quiet_noise()))


@pytest.fixture
def line_config():
    """8 m straight corridor in the exp1 flat: 8 s, 40 RTT epochs"""
    return ScenarioConfig(
        name="line",
        area=(10.0, 5.0),
        waypoints=[(1.0, 1.0), (9.0, 1.0)],
        aps=EXP1_APS,
    )


@pytest.fixture
def line_scenario(line_config):
    return build_scenario(line_config)


@pytest.fixture
def one_lap_scenario():
    """A single lap of the exp1 rectangle (22.2 s) with default noise"""
    cfg = preset_config("exp1", waypoints=[(1.0, 1.0), (9.08, 1.0), (9.08, 4.0), (1.0, 4.0), (1.0, 1.0)])
    return build_scenario(cfg)
