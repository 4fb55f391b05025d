"""Hadamard-product matrix memory with stable calibration."""

from .calibration import ShmParams, Variant, init_params
from .memory import EpisodeTrace, MemoryState, parallel_scan, read, run_sequence, unroll_closed_form, write_step

__version__ = "0.1.0"

__all__ = [
    "EpisodeTrace", "MemoryState", "ShmParams", "Variant", "init_params",
    "parallel_scan", "read", "run_sequence", "unroll_closed_form", "write_step",
]
