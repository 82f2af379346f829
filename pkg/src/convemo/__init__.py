"""Multimodal conversational emotion recognition with attention fusion and SA-GRU."""

from .data import Dialog, DatasetMeta, SynthSpec, UtteranceRecord, load_dataset, save_dataset, split_by_dialog, synth_dialogs
from .fusion import FusionMode, FusionOutput, FusionParams, fuse, fuse_dialog
from .seqmodel import SYSTEMS, ClassifierMode, Model, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dialog", "DatasetMeta", "SynthSpec", "UtteranceRecord", "load_dataset", "save_dataset",
    "split_by_dialog", "synth_dialogs", "FusionMode", "FusionOutput", "FusionParams", "fuse",
    "fuse_dialog", "SYSTEMS", "ClassifierMode", "Model", "ModelConfig", "load_checkpoint",
    "save_checkpoint", "Metrics", "TrainConfig", "evaluate", "train",
]
