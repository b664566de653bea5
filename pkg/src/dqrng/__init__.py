"""Decentralized quantum random number consensus.

Participants publish classical index lists, then their time-bin detections
of a shared entangled-pair source; every pair is checked for genuine
correlation and the selected time bins are reduced to the output.
"""
from .adversary import Strategy, prediction_advantage
from .errors import (ConfigurationError, DqrngError, EmptySelection, InsufficientEntropy,
                     PhaseViolation, ProtocolError, VerificationFailed)
from .experiment import ExperimentConfig, measure_prediction_advantage, run_experiment
from .protocol import AggFn, Phase, Session, SessionParams, audit, replay
from .quantum_sim import PumpShape, SourceConfig, generate_round
from .rounds import RoundResult, run_round

__version__ = "0.1.0"
