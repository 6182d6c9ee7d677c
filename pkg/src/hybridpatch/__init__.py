"""Hybrid Siamese/asymmetric patch descriptors for cross-spectral matching.

Everything runs on a small reverse-mode autodiff core over numpy arrays
(:mod:`hybridpatch.tensor`).  The usual entry points are re-exported here;
the submodules hold the rest.
"""

from hybridpatch.data import PatchPair, DatasetSplit, split_indices, synth_multimodal
from hybridpatch.evaluator import EvalReport, evaluate_pairset, fpr95, knn_match, roc
from hybridpatch.losses import LossConfig, hybrid_loss
from hybridpatch.mining import MiningConfig, mine_batch
from hybridpatch.model import (
    Arch,
    HybridNetwork,
    Modality,
    Variant,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from hybridpatch.trainer import TrainConfig, TrainLog, prepare_data, train

__version__ = "0.1.0"

__all__ = [
    "Arch",
    "DatasetSplit",
    "EvalReport",
    "HybridNetwork",
    "LossConfig",
    "MiningConfig",
    "Modality",
    "PatchPair",
    "TrainConfig",
    "TrainLog",
    "Variant",
    "encode",
    "evaluate_pairset",
    "fpr95",
    "hybrid_loss",
    "init_params",
    "knn_match",
    "load_checkpoint",
    "mine_batch",
    "prepare_data",
    "roc",
    "save_checkpoint",
    "split_indices",
    "synth_multimodal",
    "train",
]
