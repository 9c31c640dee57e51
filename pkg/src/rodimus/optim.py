"""Training utilities: AdamW, global-norm clipping, warmup + cosine schedule."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NonFiniteError
from .tensor import Tensor


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by min(1, max_norm / ||g||_global)."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm > 0:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def cosine_schedule(step: int, peak_lr: float, warmup_steps: int, total_steps: int, floor: float = 0.0) -> float:
    """Linear warmup from 0 to peak, then cosine decay to ``floor``."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    frac = min(max(frac, 0.0), 1.0)
    return floor + 0.5 * (peak_lr - floor) * (1.0 + np.cos(np.pi * frac))


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments.

    ``params`` is a list of (name, Tensor, no_decay) triples; parameters
    flagged no_decay (gains, biases) are exempt from weight decay.
    """

    def __init__(
        self,
        params: list[tuple[str, Tensor, bool]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t, _ in self.params]
        self.v = [np.zeros_like(t.data) for _, t, _ in self.params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, ((name, p, no_decay), g) in enumerate(zip(self.params, grads)):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if not no_decay and self.weight_decay > 0:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat dict of moment arrays for checkpointing."""
        out = {}
        for i, (name, _, _) in enumerate(self.params):
            out[f"adamw.m.{name}"] = self.m[i]
            out[f"adamw.v.{name}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, (name, p, _) in enumerate(self.params):
            m = arrays[f"adamw.m.{name}"]
            v = arrays[f"adamw.v.{name}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ConfigError(f"optimizer state shape mismatch for {name!r}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()
        self.t = int(t)
