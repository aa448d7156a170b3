"""Event-by-event state-space models for asynchronous event streams."""

from .events import (
    AugmentConfig, Batch, EventStream, SynthConfig, batch_pad, compute_deltas, cutmix,
    gen_synthetic_timing_task, load_dataset, parse_event_stream, save_dataset, write_event_stream,
)
from .model import ModelConfig, ModelWeights, init_weights, model_forward
from .ssm import DiscretizationMode, SSMParams, ssm_forward_scan, ssm_forward_sequential
from .training import TrainConfig, TrainState, evaluate, fit, run_ablation, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "Batch", "EventStream", "SynthConfig", "batch_pad", "compute_deltas", "cutmix",
    "gen_synthetic_timing_task", "load_dataset", "parse_event_stream", "save_dataset",
    "write_event_stream", "ModelConfig", "ModelWeights", "init_weights", "model_forward",
    "DiscretizationMode", "SSMParams", "ssm_forward_scan", "ssm_forward_sequential",
    "TrainConfig", "TrainState", "evaluate", "fit", "run_ablation", "train_epoch",
]
