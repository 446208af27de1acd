"""Replay sample selection for continual semantic segmentation at desk scale."""

from .buffer import BufferEntry, ReplayBuffer, quota, retrieve_uniform, settle_new_task
from .config import RunConfig, load_config
from .metrics import cka_drift, confusion, linear_cka, miou, recency_bias
from .model import PixelSegmenter, ToySegModel, forward, init_model, train_task
from .policies import KMeansPP, LinearReducer, SampleSelector
from .types import IGNORE, Rng, Sample, TaskDef, class_histogram

__version__ = "0.1.0"

__all__ = [
    "BufferEntry",
    "IGNORE",
    "KMeansPP",
    "LinearReducer",
    "PixelSegmenter",
    "ReplayBuffer",
    "Rng",
    "RunConfig",
    "Sample",
    "SampleSelector",
    "TaskDef",
    "ToySegModel",
    "cka_drift",
    "class_histogram",
    "confusion",
    "forward",
    "init_model",
    "linear_cka",
    "load_config",
    "miou",
    "quota",
    "recency_bias",
    "retrieve_uniform",
    "settle_new_task",
    "train_task",
]
