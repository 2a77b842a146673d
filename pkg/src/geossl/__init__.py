"""Hybrid masked-reconstruction / self-distillation pretraining for gridded IR imagery."""

from .data import Field, SyntheticConfig, load_frames, read_field, read_manifest, synth_sequence, write_field
from .embedding import embed_dataset, pca_profile, temporal_coherence
from .gapfill import gapfill, mask_ratio_sweep, ssim
from .heads import FinetuneConfig, ar_forward, finetune, fpn_adapter, precip_forward
from .metrics import binary_metrics, track_metrics
from .trainer import TrainSchedule, fit, lambda_schedule
from .vit import ModelConfig, init_params, load_model, preset

__version__ = "0.1.0"

__all__ = [
    "Field", "SyntheticConfig", "load_frames", "read_field", "read_manifest", "synth_sequence", "write_field",
    "embed_dataset", "pca_profile", "temporal_coherence", "gapfill", "mask_ratio_sweep", "ssim",
    "FinetuneConfig", "ar_forward", "finetune", "fpn_adapter", "precip_forward", "binary_metrics",
    "track_metrics", "TrainSchedule", "fit", "lambda_schedule", "ModelConfig", "init_params", "load_model",
    "preset", "__version__",
]
