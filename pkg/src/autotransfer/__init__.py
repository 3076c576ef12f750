"""Censoring penalties and the AutoTransfer model-selection pipeline for subject transfer."""

from .censoring import CensorConfig, PenaltyOutput, compute_penalty
from .data import SynthConfig, TrialSet, loso_split, synth_generate, zscore_trials
from .errors import AutoTransferError, ConfigError, DataError, DegenerateBatchError, NumericalError
from .numerics import LengthScalePolicy
from .pipeline import HyperGrid, autotransfer_select, cross_validate, emit_report, tune
from .scores import ScoreConfig, entropy_grad_cotangents, fit_score, score_at
from .training import TrainConfig, balanced_accuracy, subject_probe, train

__version__ = "0.1.0"
