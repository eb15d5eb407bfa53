"""Small trainable re-identification network with a hand-written backward pass.

Stages (pixel input)::

    [3x3 conv, stride s, ReLU] x len(conv_widths)
    -> 1x1 reduction to d channels
    -> subspace pooling (rank k)  or  spatial average pooling
    -> embedding (flattened U_k, or the projector embedding)
    -> linear classifier (T logits)

With ``input_mode='features'`` the conv stages are skipped and the input
tensors are taken to be backbone feature maps already.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import TripletBatch, batch_hard_triplet, cross_entropy
from .pooling import (
    FeatureMap,
    PoolCache,
    RankDeficientError,
    SubspaceDescriptor,
    flatten,
    pool_backward,
    pool_forward,
    pool_forward_batch,
    projector_embedding,
    projector_embedding_backward,
    unflatten,
)

log = logging.getLogger(__name__)

JITTER = 1e-8
MAX_JITTER_TRIES = 5


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (32, 4, 8)
    input_mode: str = "features"
    conv_widths: tuple[int, ...] = (16, 32, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    reduced_channels: int = 16
    rank: int = 4
    num_classes: int = 10
    pooling: str = "subspace"
    loss_mode: str = "tl"
    margin: float = 0.3
    reduction: str = "mean"
    triplet_weight: float = 1.0
    metric: str = "projection"
    P: int = 8
    K: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_start: int = 150
    decay_factor: float = 0.1
    decay_span: int = 0
    frozen: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        checks = {
            "input_mode": (self.input_mode, ("features", "pixels")),
            "pooling": (self.pooling, ("subspace", "average")),
            "loss_mode": (self.loss_mode, ("id", "tl", "id+tl")),
            "reduction": (self.reduction, ("sum", "mean")),
            "metric": (self.metric, ("euclidean", "projection")),
        }
        for name, (value, allowed) in checks.items():
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        if len(self.conv_widths) != len(self.conv_strides):
            raise ValueError("conv_widths and conv_strides differ in length")
        c, h, w = self.feature_shape
        if not 1 <= self.reduced_channels <= c:
            raise ValueError(f"reduced_channels={self.reduced_channels} must be in [1, {c}]")
        if self.pooling == "subspace" and not 1 <= self.rank <= min(self.reduced_channels, h * w):
            raise ValueError(
                f"rank={self.rank} must be in [1, min(d, h*w)] = "
                f"[1, {min(self.reduced_channels, h * w)}]"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must both be >= 2")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(c, h, w) of the map entering the 1x1 reduction."""
        c, h, w = self.input_shape
        if self.input_mode == "features":
            return c, h, w
        for width, stride in zip(self.conv_widths, self.conv_strides):
            c, h, w = width, (h - 1) // stride + 1, (w - 1) // stride + 1
        return c, h, w

    @property
    def embedding_dim(self) -> int:
        d = self.reduced_channels
        if self.pooling == "average":
            return d
        return d * d if self.metric == "projection" else d * self.rank

    def to_dict(self) -> dict:
        return asdict(self)


class ParamStore:
    """Named float64 parameters with same-shape gradient buffers."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        store = ParamStore({k: v.copy() for k, v in self.params.items()})
        for k, g in self.grads.items():
            store.grads[k][...] = g
        return store

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    c = config.input_shape[0]
    if config.input_mode == "pixels":
        for i, width in enumerate(config.conv_widths):
            params[f"conv{i}.weight"] = uniform((width, c, 3, 3), c * 9)
            params[f"conv{i}.bias"] = np.zeros(width)
            c = width
    d = config.reduced_channels
    params["reduce.weight"] = uniform((d, c), c)
    params["reduce.bias"] = np.zeros(d)
    e = config.embedding_dim
    params["classifier.weight"] = uniform((config.num_classes, e), e)
    params["classifier.bias"] = np.zeros(config.num_classes)
    return ParamStore(params)


def conv3x3_forward(x, weight, bias, stride):
    n, c, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, weight.shape[0], ho, wo))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            out += np.einsum("fc,nchw->nfhw", weight[:, :, di, dj], patch)
    return out + bias[None, :, None, None]


def conv3x3_backward(x, weight, stride, dout):
    n, c, h, w = x.shape
    ho, wo = dout.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    for di in range(3):
        for dj in range(3):
            rows = slice(di, di + stride * (ho - 1) + 1, stride)
            cols = slice(dj, dj + stride * (wo - 1) + 1, stride)
            dw[:, :, di, dj] = np.einsum("nfhw,nchw->fc", dout, xp[:, :, rows, cols])
            dxp[:, :, rows, cols] += np.einsum("fc,nfhw->nchw", weight[:, :, di, dj], dout)
    return dxp[:, :, 1:-1, 1:-1], dw, dout.sum(axis=(0, 2, 3))


@dataclass
class ForwardCache:
    conv_inputs: list[np.ndarray]
    conv_pre: list[np.ndarray]
    features: np.ndarray  # (N, c, h*w) entering the 1x1 reduction
    pool_caches: list[PoolCache | None]
    embeddings: np.ndarray
    jitter_count: int = 0


@dataclass
class ForwardResult:
    feature_maps: list[FeatureMap]
    descriptors: list[SubspaceDescriptor | None]
    embeddings: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def _pool_with_jitter(fm: FeatureMap, k: int, rng, first: RankDeficientError):
    err, tries = first, 0
    while tries < MAX_JITTER_TRIES:
        tries += 1
        log.info("rank-deficient feature map (%s); adding %.0e jitter", err, JITTER)
        fm = FeatureMap(fm.channels, fm.height, fm.width,
                        fm.A + JITTER * rng.standard_normal(fm.A.shape))
        try:
            desc, cache = pool_forward(fm, k)
            return desc, cache, tries
        except RankDeficientError as exc:
            err = exc
    raise err


def forward(images, config: ModelConfig, params: ParamStore, jitter_rng=None) -> ForwardResult:
    """Run the network on a batch (N, C, H, W).

    ``jitter_rng`` enables the rank-deficiency fallback used in training;
    without it a degenerate feature map raises :class:`RankDeficientError`.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != tuple(config.input_shape):
        raise ValueError(f"batch shape {x.shape} does not match input {config.input_shape}")
    conv_inputs, conv_pre = [], []
    if config.input_mode == "pixels":
        for i, stride in enumerate(config.conv_strides):
            conv_inputs.append(x)
            z = conv3x3_forward(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride)
            conv_pre.append(z)
            x = np.maximum(z, 0.0)
    n, c, h, w = x.shape
    feats = x.reshape(n, c, h * w)
    reduced = np.einsum("dc,ncl->ndl", params["reduce.weight"], feats)
    reduced += params["reduce.bias"][None, :, None]

    d = config.reduced_channels
    maps = [FeatureMap(d, h, w, reduced[i]) for i in range(n)]
    jitter = 0
    if config.pooling == "average":
        descs, caches = [None] * n, [None] * n
        emb = list(reduced.mean(axis=2))
    else:
        descs, caches, emb = [], [], []
        for fm, pooled in zip(maps, pool_forward_batch(maps, config.rank)):
            if isinstance(pooled, RankDeficientError):
                if jitter_rng is None:
                    raise pooled
                desc, cache, tries = _pool_with_jitter(fm, config.rank, jitter_rng, first=pooled)
                jitter += tries
            else:
                desc, cache = pooled
            descs.append(desc)
            caches.append(cache)
            emb.append(projector_embedding(desc.U) if config.metric == "projection"
                       else flatten(desc))
    embeddings = np.stack(emb)
    logits = embeddings @ params["classifier.weight"].T + params["classifier.bias"]
    cache = ForwardCache(conv_inputs, conv_pre, feats, caches, embeddings, jitter)
    return ForwardResult(maps, descs, embeddings, logits, cache)


def backward(cache: ForwardCache, config: ModelConfig, params: ParamStore,
             d_logits=None, d_embeddings=None) -> None:
    """Accumulate parameter gradients into ``params.grads``."""
    emb = cache.embeddings
    n = emb.shape[0]
    if d_logits is None:
        d_logits = np.zeros((n, config.num_classes))
    if d_embeddings is None:
        d_embeddings = np.zeros_like(emb)
    g = params.grads
    g["classifier.weight"] += d_logits.T @ emb
    g["classifier.bias"] += d_logits.sum(axis=0)
    d_emb = d_embeddings + d_logits @ params["classifier.weight"]

    feats = cache.features
    d, k = config.reduced_channels, config.rank
    hw = feats.shape[2]
    d_reduced = np.empty((n, d, hw))
    for i in range(n):
        if config.pooling == "average":
            d_reduced[i] = np.repeat(d_emb[i][:, None] / hw, hw, axis=1)
            continue
        pc = cache.pool_caches[i]
        if config.metric == "projection":
            dU = projector_embedding_backward(pc.output(), d_emb[i])
        else:
            dU = unflatten(d_emb[i], d, k)
        d_reduced[i] = pool_backward(pc, dU)

    g["reduce.weight"] += np.einsum("ndl,ncl->dc", d_reduced, feats)
    g["reduce.bias"] += d_reduced.sum(axis=(0, 2))
    if config.input_mode != "pixels":
        return
    d_feats = np.einsum("dc,ndl->ncl", params["reduce.weight"], d_reduced)
    dx = d_feats.reshape(cache.conv_pre[-1].shape)
    for i in reversed(range(len(config.conv_strides))):
        dz = dx * (cache.conv_pre[i] > 0)
        dx, dw, db = conv3x3_backward(cache.conv_inputs[i], params[f"conv{i}.weight"],
                                      config.conv_strides[i], dz)
        g[f"conv{i}.weight"] += dw
        g[f"conv{i}.bias"] += db


@dataclass
class LossBreakdown:
    total: float
    loss_id: float
    loss_tl: float
    d_logits: np.ndarray | None
    d_embeddings: np.ndarray | None


def compute_loss(result: ForwardResult, labels, config: ModelConfig) -> LossBreakdown:
    """Combined objective ``L_id + weight * L_tl`` per ``config.loss_mode``.

    ``labels`` are class indices in ``[0, num_classes)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    loss_id = loss_tl = 0.0
    d_logits = d_emb = None
    if config.loss_mode in ("id", "id+tl"):
        ce = cross_entropy(result.logits, labels)
        loss_id, d_logits = ce.loss, ce.grad
    if config.loss_mode in ("tl", "id+tl"):
        tl = batch_hard_triplet(TripletBatch(result.embeddings, labels, config.margin),
                                config.reduction)
        loss_tl = tl.loss
        d_emb = config.triplet_weight * tl.grad
    total = loss_id + config.triplet_weight * loss_tl
    return LossBreakdown(total, loss_id, loss_tl, d_logits, d_emb)


def embed(images, config: ModelConfig, params: ParamStore, batch_size: int = 64,
          seed: int = 0) -> np.ndarray:
    """Embeddings for a whole array of inputs, in order."""
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = [forward(images[s:s + batch_size], config, params, rng).embeddings
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, config.embedding_dim))
