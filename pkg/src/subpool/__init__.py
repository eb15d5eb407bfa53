"""Differentiable subspace pooling for metric learning and re-identification."""

from .numerics import ConvergenceError, NonFiniteError, SvdFactors, frobenius_norm, matmul, svd, svd_batch
from .pooling import (
    FeatureMap,
    PoolCache,
    RankDeficientError,
    SubspaceDescriptor,
    canonicalize_signs,
    flatten,
    pool_backward,
    pool_forward,
    projection_distance,
    unflatten,
)
from .losses import LossResult, TripletBatch, batch_hard_triplet, cross_entropy, pairwise_distances
from .model import ModelConfig, ParamStore, backward, forward, init_params
from .optim import AdamState, adam_step
from .retrieval import EvalProtocol, EvalReport, Sample, evaluate, export_ranking, rank_gallery
from .data_io import Dataset, SplitSpec, load_dataset, read_tensor, save_dataset, split_dataset, write_tensor
from .synthetic import generate_redundant_channels, generate_synthetic
from .training import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
