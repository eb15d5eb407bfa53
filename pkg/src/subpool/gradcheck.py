"""Finite-difference verification of every analytic gradient in the package.

Each stage builds a small seeded instance, compares the analytic gradient
with central differences and reports the norm-wise relative error
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``. For the
pipeline stages the error is taken per parameter tensor and the maximum is
reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import TripletBatch, batch_hard_triplet, cross_entropy
from .model import ModelConfig, backward, compute_loss, forward, init_params
from .pooling import FeatureMap, pool_backward, pool_forward


@dataclass(frozen=True)
class StageResult:
    stage: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "max_rel_error": float(self.error),
                "tolerance": self.tolerance, "passed": self.passed, "detail": self.detail}


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def central_difference(f: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Numerical gradient of ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return grad


def check_pooling(seed: int = 0, tol: float = 1e-5) -> StageResult:
    """Random 5x8 map, k = 2, loss ``sum(W * U_k)``, step 1e-5."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 8))
    W = rng.standard_normal((5, 2))

    def loss():
        desc, _ = pool_forward(FeatureMap(5, 1, 8, A), 2)
        return float(np.sum(W * desc.U))

    _, cache = pool_forward(FeatureMap(5, 1, 8, A), 2)
    analytic = pool_backward(cache, W)
    return StageResult("pooling", relative_error(analytic, central_difference(loss, A, 1e-5)), tol)


def degenerate_matrix(seed: int = 0, n: int = 6, gap: float = 5e-7) -> np.ndarray:
    """n x n matrix whose second and third singular values differ by ``gap``."""
    rng = np.random.default_rng(seed)
    left, _ = np.linalg.qr(rng.standard_normal((n, n)))
    right, _ = np.linalg.qr(rng.standard_normal((n, n)))
    sigma = np.array([3.0, 2.0, 2.0 - gap, 1.0, 0.5, 0.25][:n])
    return (left * sigma) @ right.T


def check_pooling_degenerate(seed: int = 0, tol: float = 1e-3) -> StageResult:
    """6x6 map with two retained singular values 5e-7 apart, k = 3.

    The individual vectors spanning a near-degenerate pair are not
    differentiable in any useful sense (their derivative scales like
    1/gap), so the loss is taken on the retained projector,
    ``sum(W * U_k U_k^T)``, which is smooth in ``A``.
    """
    rng = np.random.default_rng(seed + 1)
    A = degenerate_matrix(seed)
    W = rng.standard_normal((6, 6))
    Ws = W + W.T

    def loss():
        U = pool_forward(FeatureMap(6, 1, 6, A), 3)[0].U
        return float(np.sum(W * (U @ U.T)))

    desc, cache = pool_forward(FeatureMap(6, 1, 6, A), 3)
    analytic = pool_backward(cache, Ws @ desc.U)
    numeric = central_difference(loss, A, 1e-5)
    if not np.all(np.isfinite(analytic)):
        return StageResult("pooling_degenerate", float("inf"), tol, "non-finite gradient")
    return StageResult("pooling_degenerate", relative_error(analytic, numeric), tol)


def check_crossentropy(seed: int = 0, tol: float = 1e-5) -> StageResult:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 7))
    labels = rng.integers(0, 7, size=5)
    analytic = cross_entropy(logits, labels).grad
    numeric = central_difference(lambda: cross_entropy(logits, labels).loss, logits, 1e-6)
    return StageResult("crossentropy", relative_error(analytic, numeric), tol)


def check_triplet(seed: int = 0, tol: float = 1e-5) -> StageResult:
    """Random P = 3, K = 4 batch, margin 0.3, mean reduction."""
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((12, 5))
    labels = np.repeat(np.arange(3), 4)

    def loss():
        return batch_hard_triplet(TripletBatch(emb, labels, 0.3)).loss

    analytic = batch_hard_triplet(TripletBatch(emb, labels, 0.3)).grad
    numeric = central_difference(loss, emb, 1e-6)
    return StageResult("triplet", relative_error(analytic, numeric), tol)


def toy_config(metric: str = "euclidean", pooling: str = "subspace") -> ModelConfig:
    """Pixel-input network small enough for exhaustive finite differences."""
    return ModelConfig(
        input_shape=(2, 16, 16), input_mode="pixels", conv_widths=(3, 4, 6),
        conv_strides=(2, 2, 2), reduced_channels=4, rank=2, num_classes=3,
        pooling=pooling, loss_mode="id+tl", metric=metric, P=2, K=2,
    )


def check_pipeline(seed: int = 0, tol: float = 1e-4, metric: str = "euclidean",
                   pooling: str = "subspace") -> StageResult:
    """Every parameter of the toy network, combined loss, step 1e-4.

    The batch is P = 2 identities x K = 2 images, the smallest batch on which
    the triplet term is defined.
    """
    config = toy_config(metric, pooling)
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((4, *config.input_shape))
    labels = np.array([0, 0, 1, 1])
    params = init_params(config, seed)
    # Non-zero biases so their gradients are exercised away from a symmetric start.
    for name in params:
        if name.endswith(".bias"):
            params[name][...] = 0.1 * rng.standard_normal(params[name].shape)

    def loss():
        return compute_loss(forward(images, config, params), labels, config).total

    out = forward(images, config, params)
    losses = compute_loss(out, labels, config)
    params.zero_grad()
    backward(out.cache, config, params, losses.d_logits, losses.d_embeddings)

    worst, worst_name = 0.0, ""
    for name in params:
        numeric = central_difference(loss, params[name], 1e-4)
        err = relative_error(params.grads[name], numeric)
        if err > worst or not worst_name:
            worst, worst_name = err, name
    stage = {"euclidean": "pipeline", "projection": "pipeline_projection"}[metric]
    if pooling == "average":
        stage = "pipeline_average"
    return StageResult(stage, worst, tol, f"worst parameter {worst_name}")


STAGES: dict[str, Callable[[], StageResult]] = {
    "pooling": check_pooling,
    "crossentropy": check_crossentropy,
    "triplet": check_triplet,
    "pipeline": check_pipeline,
    "pipeline_projection": lambda: check_pipeline(metric="projection"),
    "pipeline_average": lambda: check_pipeline(pooling="average"),
    "pooling_degenerate": check_pooling_degenerate,
}
DEFAULT_STAGES = tuple(s for s in STAGES if s != "pooling_degenerate")


def run(stages=None, degenerate: bool = False) -> list[StageResult]:
    """Run the named stages (default: all but the degenerate case)."""
    names = list(stages) if stages else list(DEFAULT_STAGES)
    if degenerate and "pooling_degenerate" not in names:
        names.append("pooling_degenerate")
    unknown = [n for n in names if n not in STAGES]
    if unknown:
        raise ValueError(f"unknown gradcheck stage(s) {unknown}; choose from {sorted(STAGES)}")
    return [STAGES[n]() for n in names]
