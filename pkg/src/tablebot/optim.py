"""AdamW with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """First/second moment buffers per parameter name, plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def buffers_for(self, name: str, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        if self.m[name].shape != shape:
            raise ShapeError(
                f"adamw: moment buffer for {name!r} has shape {self.m[name].shape}, "
                f"parameter has {shape}"
            )
        return self.m[name], self.v[name]


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    wd: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamWState]:
    """One update over all params present in `grads`. Updates happen in place.

    Weight decay is decoupled: p *= (1 - lr*wd) before the moment update.
    A non-finite gradient anywhere skips the whole step (reported, not raised).
    """
    if lr <= 0 or eps <= 0:
        raise ValueError(f"adamw: lr and eps must be > 0, got lr={lr} eps={eps}")
    for name, g in grads.items():
        garr = g.data if isinstance(g, Tensor) else g
        if params[name].shape != garr.shape:
            raise ShapeError(
                f"adamw: gradient for {name!r} has shape {garr.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.isfinite(garr).all():
            log.warning("adamw: non-finite gradient for %r at step %d, step skipped",
                        name, state.step)
            return params, state

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    b1, b2 = np.float32(beta1), np.float32(beta2)
    for name in sorted(grads):
        g = grads[name]
        garr = g.data if isinstance(g, Tensor) else g
        p = params[name].data
        m, v = state.buffers_for(name, p.shape)
        if wd:
            p *= np.float32(1.0 - lr * wd)
        m *= b1
        m += (1.0 - b1) * garr
        v *= b2
        v += (1.0 - b2) * (garr * garr)
        mhat = m / np.float32(bc1)
        vhat = v / np.float32(bc2)
        p -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))
    return params, state


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        garr = g.data if isinstance(g, Tensor) else g
        total += float(np.dot(garr.reshape(-1), garr.reshape(-1)))
    return float(np.sqrt(total))
