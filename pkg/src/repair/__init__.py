"""Noisy-correspondence training on synthetic paired embeddings.

Rank-correlation soft labels from a memory bank, GMM-based clean/noisy
selection, co-teaching, and noisy-pair half-replacing, with a CLI for
experiments and ablations.
"""

from . import (cli, container, dataset, encoders, evaluation, gmm, kernels,
               memory_bank, npr, rank_correlation, reporting, trainer)
from ._version import __version__
from .dataset import PairDataset, RawPair, generate
from .encoders import EncoderPair, init_encoders, similarity, soft_margin
from .memory_bank import BankSnapshot, MemoryBank
from .rank_correlation import SoftLabelSet, normalize_labels, ranks, spearman
from .trainer import TrainConfig, TrainerState, train

__all__ = [
    "BankSnapshot", "EncoderPair", "MemoryBank", "PairDataset", "RawPair",
    "SoftLabelSet", "TrainConfig", "TrainerState", "__version__", "cli",
    "container", "dataset", "encoders", "evaluation", "generate", "gmm",
    "init_encoders", "kernels", "memory_bank", "normalize_labels", "npr",
    "rank_correlation", "ranks", "reporting", "similarity", "soft_margin",
    "spearman", "train", "trainer",
]
