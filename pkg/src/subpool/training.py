"""P x K training loop, descriptor extraction, and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, Split, read_tensor, write_tensor
from .model import ModelConfig, ParamStore, backward, compute_loss, embed, forward, init_params
from .optim import AdamState, adam_step
from .retrieval import EvalProtocol, EvalReport, evaluate, samples_from_arrays

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    params: ParamStore
    adam: AdamState
    log: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    class_ids: np.ndarray | None = None
    jitter_count: int = 0


class PKSampler:
    """Draw P identities without replacement, then K images of each."""

    def __init__(self, person_ids, P: int, K: int, rng: np.random.Generator):
        pids = np.asarray(person_ids)
        self.groups = {int(p): np.flatnonzero(pids == p) for p in np.unique(pids) if p >= 0}
        self.eligible = np.array(sorted(p for p, g in self.groups.items() if len(g) >= K))
        if len(self.eligible) < P:
            raise TrainingError(
                f"P x K batches need {P} identities with >= {K} images; "
                f"only {len(self.eligible)} qualify"
            )
        self.P, self.K, self.rng = P, K, rng

    def sample(self) -> np.ndarray:
        ids = self.rng.choice(self.eligible, size=self.P, replace=False)
        return np.concatenate(
            [self.rng.choice(self.groups[int(i)], size=self.K, replace=False) for i in ids]
        )


def make_adam(config: ModelConfig, params: ParamStore, epochs: int) -> AdamState:
    span = config.decay_span or max(epochs - config.decay_start, 1)
    return AdamState.for_params(
        params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
        decay_start=config.decay_start, decay_factor=config.decay_factor, decay_span=span,
    )


def train(dataset: Dataset, config: ModelConfig, epochs: int, seed: int,
          steps_per_epoch: int | None = None, eval_fn=None, eval_every: int = 0) -> TrainResult:
    """Train on every identity in ``dataset`` (pass the training split only).

    ``config.num_classes`` must equal the number of training identities;
    labels are mapped to class indices in sorted id order. One epoch is
    ``steps_per_epoch`` P x K batches (default: enough batches to cover the
    dataset once). ``eval_fn(params, epoch)`` is called every ``eval_every``
    epochs and its return value stored in ``snapshots``.
    """
    class_ids = np.unique(dataset.person_ids[dataset.person_ids >= 0])
    if len(class_ids) != config.num_classes:
        raise TrainingError(
            f"config.num_classes={config.num_classes} but the data has {len(class_ids)} identities"
        )
    rng = np.random.default_rng(seed)
    params = init_params(config, int(rng.integers(2**31)))
    adam = make_adam(config, params, epochs)
    result = TrainResult(params, adam, class_ids=class_ids)
    if epochs <= 0:
        return result

    sampler = PKSampler(dataset.person_ids, config.P, config.K, rng)
    labels_all = np.searchsorted(class_ids, dataset.person_ids)
    if steps_per_epoch is None:
        steps_per_epoch = max(1, math.ceil(len(dataset) / (config.P * config.K)))

    for epoch in range(1, epochs + 1):
        sums = np.zeros(3)
        lr = adam.learning_rate(epoch)
        for _ in range(steps_per_epoch):
            idx = sampler.sample()
            out = forward(dataset.tensors[idx], config, params, jitter_rng=rng)
            result.jitter_count += out.cache.jitter_count
            losses = compute_loss(out, labels_all[idx], config)
            if not math.isfinite(losses.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            params.zero_grad()
            backward(out.cache, config, params, losses.d_logits, losses.d_embeddings)
            lr = adam_step(params, adam, epoch, config.frozen)
            if not params.all_finite():
                raise NumericalError(f"non-finite parameters after step {adam.step}")
            sums += (losses.total, losses.loss_id, losses.loss_tl)
        mean = sums / steps_per_epoch
        entry = {"epoch": epoch, "loss": mean[0], "loss_id": mean[1], "loss_tl": mean[2], "lr": lr}
        result.log.append(entry)
        log.debug("epoch %d loss %.6f", epoch, mean[0])
        if eval_fn is not None and eval_every and epoch % eval_every == 0:
            result.snapshots.append({"epoch": epoch, "report": eval_fn(params, epoch)})
    if result.jitter_count:
        log.info("rank-deficiency jitter applied %d times", result.jitter_count)
    return result


def evaluate_split(dataset: Dataset, split: Split, config: ModelConfig, params: ParamStore,
                   protocol: EvalProtocol | None = None, threads: int = 1) -> EvalReport:
    """Embed the query and gallery images of ``split`` and score them."""
    protocol = protocol or EvalProtocol()
    q_emb = embed(dataset.tensors[split.query], config, params)
    g_emb = embed(dataset.tensors[split.gallery], config, params)
    queries = samples_from_arrays(q_emb, dataset.person_ids[split.query],
                                  dataset.camera_ids[split.query],
                                  [dataset.paths[i] for i in split.query])
    gallery = samples_from_arrays(g_emb, dataset.person_ids[split.gallery],
                                  dataset.camera_ids[split.gallery],
                                  [dataset.paths[i] for i in split.gallery])
    return evaluate(queries, gallery, protocol, threads=threads)


def _config_from_dict(raw: dict) -> ModelConfig:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ValueError(f"unknown model config key {key!r}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return ModelConfig(**kwargs)


def save_checkpoint(directory, params: ParamStore, adam: AdamState, config: ModelConfig) -> Path:
    """One SPTF file per parameter and Adam moment, plus ``model.json``.

    Values are stored as float32, so a reloaded model matches the saved one
    to single precision.
    """
    out = Path(directory)
    (out / "params").mkdir(parents=True, exist_ok=True)
    (out / "adam").mkdir(parents=True, exist_ok=True)
    for name, value in params.params.items():
        write_tensor(out / "params" / f"{name}.sptf", value)
        write_tensor(out / "adam" / f"m.{name}.sptf", adam.m[name])
        write_tensor(out / "adam" / f"v.{name}.sptf", adam.v[name])
    meta = {
        "model": config.to_dict(),
        "adam": {k: getattr(adam, k) for k in
                 ("lr", "beta1", "beta2", "eps", "decay_start", "decay_factor", "decay_span", "step")},
        "params": params.names(),
    }
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(directory) -> tuple[ParamStore, AdamState, ModelConfig]:
    src = Path(directory)
    meta = json.loads((src / "model.json").read_text())
    config = _config_from_dict(meta["model"])
    names = meta["params"]
    params = ParamStore({n: read_tensor(src / "params" / f"{n}.sptf") for n in names})
    adam = AdamState(**meta["adam"])
    adam.m = {n: read_tensor(src / "adam" / f"m.{n}.sptf").astype(np.float64) for n in names}
    adam.v = {n: read_tensor(src / "adam" / f"v.{n}.sptf").astype(np.float64) for n in names}
    return params, adam, config
