"""Feedback linearisation of PNLSS-modelled systems by model predictive control."""

from .errors import ConditioningError, ConfigError, DivergenceError, ModelFormatError
from .estimator import UkfConfig, UkfState, init_state, predict, update
from .excitation import MultisineSpec, design, realisations
from .mpc import LinearisingController, MpcGainSet, precompute_gains
from .plantsim import (ClosedLoopConfig, ClosedLoopRecord, DuffingPlant, NoiseConfig, SurrogatePlant,
                       run_linearised, run_open_loop)
from .records import SignalRecord
from .sigmodel import PolyNlssModel, augment, bundled_model, load_model, resample, simulate

__version__ = "0.1.0"
