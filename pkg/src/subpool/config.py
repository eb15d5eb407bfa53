"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data_io import SplitSpec
from .model import ModelConfig
from .retrieval import EvalProtocol

SEED_ENV = "SUBPOOL_SEED"


class ConfigError(ValueError):
    pass


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _opt(default, doc: str, **kwargs):
    return field(default=default, metadata={"doc": doc}, **kwargs)


@dataclass(frozen=True)
class RunConfig:
    seed: int = field(default_factory=_env_seed,
                      metadata={"doc": f"master seed (default from ${SEED_ENV}, else 0)"})
    # synthetic data
    num_ids: int = _opt(20, "identities generated by synth")
    per_id: int = _opt(8, "images per identity")
    cameras: int = _opt(2, "cameras; image i of an identity is seen by camera i % cameras")
    channels: int = _opt(32, "feature channels (1 or 3 for pixel data)")
    height: int = _opt(4, "map height")
    width: int = _opt(8, "map width")
    intra_noise: float = _opt(0.8, "std of per-image Gaussian noise")
    camera_shift: float = _opt(1.0, "std of the per-camera per-channel offset")
    spectrum_decay: float = _opt(0.6, "singular value ratio of the identity prototypes")
    # split
    train_fraction: float = _opt(0.5, "fraction of identities used for training")
    queries_per_group: int = _opt(1, "queries drawn from each test (id, camera) group")
    # model
    input_mode: str = _opt("features", "features (skip conv stages) or pixels")
    conv_widths: tuple = _opt((16, 32, 64), "conv stage widths (pixels mode)")
    conv_strides: tuple = _opt((2, 2, 2), "conv stage strides (pixels mode)")
    reduced_channels: int = _opt(16, "channels after the 1x1 reduction (d)")
    rank: int = _opt(4, "pooled subspace rank k")
    pooling: str = _opt("subspace", "subspace or average")
    loss_mode: str = _opt("tl", "id, tl or id+tl")
    margin: float = _opt(0.3, "triplet margin")
    reduction: str = _opt("mean", "triplet reduction: mean or sum")
    triplet_weight: float = _opt(1.0, "weight of the triplet term in id+tl")
    metric: str = _opt("projection", "descriptor metric: projection or euclidean (flattened U_k)")
    P: int = _opt(8, "identities per batch")
    K: int = _opt(4, "images per identity per batch")
    # optimizer
    epochs: int = _opt(20, "training epochs")
    steps_per_epoch: int = _opt(10, "P x K batches per epoch (0: one pass over the data)")
    lr: float = _opt(2e-4, "Adam base learning rate")
    beta1: float = _opt(0.9, "Adam beta1")
    beta2: float = _opt(0.999, "Adam beta2")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    decay_start: int = _opt(150, "last epoch at the base learning rate")
    decay_factor: float = _opt(0.1, "total decay reached after decay_span further epochs")
    decay_span: int = _opt(0, "epochs over which decay_factor is reached (0: epochs - decay_start)")
    frozen: tuple = _opt((), "parameter name prefixes excluded from updates, e.g. conv")
    # evaluation
    mode: str = _opt("single", "single or multi query protocol")
    cross_camera: bool = _opt(True, "drop same-id same-camera gallery entries")
    multi_pool: str = _opt("mean", "multi-query pooling: mean or max")
    max_rank: int = _opt(20, "length of the reported CMC curve")
    f_cutoff: int = _opt(10, "rank cutoff of the F-score")
    eval_threads: int = _opt(1, "worker threads for per-query evaluation")
    eval_every: int = _opt(0, "evaluate the held-out split every N epochs (0: never)")

    def model_config(self, input_shape, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_shape=tuple(int(v) for v in input_shape), input_mode=self.input_mode,
            conv_widths=tuple(self.conv_widths), conv_strides=tuple(self.conv_strides),
            reduced_channels=self.reduced_channels, rank=self.rank, num_classes=num_classes,
            pooling=self.pooling, loss_mode=self.loss_mode, margin=self.margin,
            reduction=self.reduction, triplet_weight=self.triplet_weight, metric=self.metric,
            P=self.P, K=self.K, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, decay_start=self.decay_start,
            decay_factor=self.decay_factor, decay_span=self.decay_span,
            frozen=tuple(self.frozen),
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.seed, self.queries_per_group)

    def eval_protocol(self) -> EvalProtocol:
        # Embeddings are compared with Euclidean distance: for the projection
        # metric they already are projector embeddings.
        return EvalProtocol(mode=self.mode, cross_camera=self.cross_camera,
                            metric="euclidean", max_rank=self.max_rank,
                            f_cutoff=self.f_cutoff, multi_pool=self.multi_pool)

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for name, f in FIELDS.items():
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{name} = {format_value(getattr(self, name))}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

PRESETS = {
    # Hyperparameters of the original full-scale regime.
    "paper": {"lr": 2e-4, "decay_start": 150, "epochs": 300, "P": 32, "K": 4,
              "steps_per_epoch": 0},
    "desk": {},
}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(name: str, text: str):
    """Convert ``text`` to the type of ``name``'s default."""
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    f = FIELDS[name]
    default = f.default if f.default is not dataclasses.MISSING else 0
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if name in ("conv_widths", "conv_strides"):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {text!r}") from None
    return text


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of typed overrides."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from None
    return values


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then the file, then explicit overrides."""
    config = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        config = config.replace(**PRESETS[preset])
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {p}: {err.strerror}") from None
        config = config.replace(**parse_config(text, str(p)))
    if overrides:
        config = config.replace(**{k: v for k, v in overrides.items() if v is not None})
    return config
