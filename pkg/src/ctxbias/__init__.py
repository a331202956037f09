"""Contextual biasing adapters for neural-transducer speech recognition."""
from .biasing import VARIANTS, BiasingAdapters, BiasingList, VariantConfig, build_biasing_list
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .estimator import ContextualTransducer
from .metrics import attention_metrics, classed_wer, wer, werr
from .transducer import Transducer, greedy_decode, rnnt_loss

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "BiasingAdapters", "BiasingList", "VariantConfig", "build_biasing_list",
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint", "ExperimentConfig",
    "ContextualTransducer", "attention_metrics", "classed_wer", "wer", "werr",
    "Transducer", "greedy_decode", "rnnt_loss",
]
