"""Scenario generation, Monte Carlo runner, file I/O and the command line."""

from .classical import classical_cfar_detect
from .radar import RadarParams, freq_to_state, state_to_freq
from .scenario import Scenario, ScenarioSpec, generate_scenario
from .tensor_io import read_tensor, write_tensor

__all__ = [
    "RadarParams",
    "Scenario",
    "ScenarioSpec",
    "classical_cfar_detect",
    "freq_to_state",
    "generate_scenario",
    "read_tensor",
    "state_to_freq",
    "write_tensor",
]
