"""Adam with a constant-then-exponential learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ParamStore


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: int = 150
    decay_factor: float = 0.1
    decay_span: int = 150
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.params.items()}
        return state

    def learning_rate(self, epoch: int) -> float:
        """``lr`` up to ``decay_start``, then ``lr * factor ** ((epoch - start) / span)``.

        Epochs are 1-based.
        """
        if epoch <= self.decay_start:
            return self.lr
        span = max(self.decay_span, 1)
        return self.lr * self.decay_factor ** ((epoch - self.decay_start) / span)


def adam_step(params: ParamStore, state: AdamState, epoch: int = 1,
              frozen: tuple[str, ...] = ()) -> float:
    """Apply one bias-corrected Adam update in place; returns the lr used.

    Parameters whose name starts with any prefix in ``frozen`` are skipped
    entirely (their moments are not touched either). If any gradient is
    non-finite nothing is updated.
    """
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}; step aborted")
    lr = state.learning_rate(epoch)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.params.items():
        if frozen and name.startswith(frozen):
            continue
        g = params.grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return lr
