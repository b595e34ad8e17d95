"""Gecko: CEMA, timestep decay normalization, sliding chunk attention and
adaptive working memory in a small streaming language model."""

from .cema import Cema, CemaParams, cema_scan, cema_sequential
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .memory import MemoryState, awm_retrieve, awm_update
from .model import GeckoLM, ModelConfig, StreamState, parameter_count, stream_generate, stream_score
from .norm import NormConfig, NormState, TimestepNorm, tsdn_batch, tsdn_step
from .numerics import NonFiniteError, ShapeError, grad_check
from .optim import OptimConfig

__all__ = [
    "Cema", "CemaParams", "cema_scan", "cema_sequential",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "MemoryState", "awm_retrieve", "awm_update",
    "GeckoLM", "ModelConfig", "StreamState", "parameter_count", "stream_generate", "stream_score",
    "NormConfig", "NormState", "TimestepNorm", "tsdn_batch", "tsdn_step",
    "NonFiniteError", "ShapeError", "grad_check", "OptimConfig",
]
