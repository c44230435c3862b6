"""Audio-visual valence/arousal regression with a cross-modal attention
transformer and missing-modality training augmentations."""

import os

# the workload is many small matmuls; OpenBLAS spin-waiting worker threads
# fight the main thread for cores and roughly double step times, so default
# to single-threaded BLAS (set the env var yourself to override)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from .augment import AblationSpec
from .data import ClipRecord, Dataset, NormStats, SyntheticConfig
from .metrics import EvalSummary, ccc, ccc_loss, eval_summary
from .model import ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint

__all__ = [
    "AblationSpec",
    "ClipRecord",
    "Dataset",
    "EvalSummary",
    "ModelConfig",
    "NormStats",
    "SyntheticConfig",
    "ccc",
    "ccc_loss",
    "eval_summary",
    "init_params",
    "load_checkpoint",
    "model_forward",
    "save_checkpoint",
]
