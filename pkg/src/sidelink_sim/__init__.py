"""Subframe-level simulator for sidelink semi-persistent scheduling with power control."""
from .config import RunConfig, load
from .engine import RunResult, run, sweep
from .grid import ConfigError, InfeasibleError

__all__ = ["RunConfig", "RunResult", "ConfigError", "InfeasibleError", "load", "run", "sweep"]
__version__ = "0.1.0"
