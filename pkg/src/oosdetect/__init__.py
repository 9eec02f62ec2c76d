"""Out-of-step detection from transient energy flows on a classical power-system model."""
from .netmodel import NetworkCase, load_case
from .simcore import Scenario, Trajectory, load_scenario, simulate

__all__ = ["NetworkCase", "load_case", "Scenario", "Trajectory", "load_scenario", "simulate"]
__version__ = "0.1.0"
