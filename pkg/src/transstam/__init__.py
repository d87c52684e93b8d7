"""Transformer-based tracklet-detection association for multi-object tracking."""

from .association import associate, hungarian, speed_filter
from .data import AppearanceProvider, SynthSpec, parse_mot_csv, synth_generate, write_results
from .metrics import EvalReport, evaluate
from .model import ModelConfig, assignment_matrix, init_params, load_checkpoint, save_checkpoint
from .tracker import Tracker, TrackerConfig, run_sequence
from .training import OptimizerConfig, train

__version__ = "0.1.0"

__all__ = [
    "AppearanceProvider",
    "EvalReport",
    "ModelConfig",
    "OptimizerConfig",
    "SynthSpec",
    "Tracker",
    "TrackerConfig",
    "assignment_matrix",
    "associate",
    "evaluate",
    "hungarian",
    "init_params",
    "load_checkpoint",
    "parse_mot_csv",
    "run_sequence",
    "save_checkpoint",
    "speed_filter",
    "synth_generate",
    "train",
    "write_results",
]
