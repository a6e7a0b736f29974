"""
SmoothGuard - randomized-smoothing inference, attacks and noise-injection training at desk scale.
"""

from .attacks import AttackConfig, AttackFamily
from .engine import Model
from .logging import Logger
from .noise import NoiseDraw, NoiseSpec, NoiseStream, NoiseTarget
from .smoothing import SmoothedOracle, SmoothingConfig, VoteTally, Voting, smooth_predict
from .training import Trainer, TrainConfig, TrainMode

__version__ = "0.1.0"
__all__ = [
    "AttackConfig",
    "AttackFamily",
    "Logger",
    "Model",
    "NoiseDraw",
    "NoiseSpec",
    "NoiseStream",
    "NoiseTarget",
    "SmoothedOracle",
    "SmoothingConfig",
    "TrainConfig",
    "TrainMode",
    "Trainer",
    "VoteTally",
    "Voting",
    "smooth_predict",
]
