"""History-conditioned policy transformer.

Each context step contributes K+5 slots: K fused vision-language features,
4 proprioception embeddings and one action embedding (a learned placeholder
at the current step). Attention is block-causal: slots attend freely within
their own step and to every earlier step. The action readout comes from the
current step's placeholder slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .geometry import canonicalize_quaternion
from .blockworld.scene import Action
from .tensor import Tensor

ACTION_DIM = 8


@dataclass(frozen=True)
class PolicyConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    context: int = 4
    cameras: int = 3

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def slots_per_step(self) -> int:
        return self.cameras + 5

    @property
    def tokens(self) -> int:
        return self.context * self.slots_per_step


@dataclass
class ContextWindow:
    """Embedded policy input: (B, C*(K+5), d) slot embeddings plus the per-step
    validity mask (B, C). Invalid (pre-episode) steps were replaced by the
    learned pad embedding."""

    slots: Tensor
    valid: np.ndarray


@dataclass
class PredictedAction:
    """Raw 8-dim head output; `executed()` yields the canonicalized action."""

    raw: Tensor

    def executed(self, i: int = 0) -> Action:
        a = self.raw.data[i]
        return Action(
            pos=a[:3].astype(np.float32).copy(),
            quat=canonicalize_quaternion(a[3:7]),
            gripper=1.0 if a[7] >= 0.5 else 0.0,
        )


def init_policy_params(cfg: PolicyConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["pol/pos"] = T.normal_param(rng, (cfg.tokens, cfg.dim))
    p["pol/pad"] = T.normal_param(rng, (cfg.dim,))
    p["pol/act_placeholder"] = T.normal_param(rng, (cfg.dim,))
    p["pol/proprio_w"] = T.normal_param(rng, (4, cfg.dim))
    p["pol/proprio_b"] = T.zeros_param((4, cfg.dim))
    nn.init_linear(p, rng, "pol/act_embed", ACTION_DIM, cfg.dim)
    for i in range(cfg.depth):
        nn.init_block(p, rng, f"pol/blk{i}", cfg.dim)
    nn.init_layernorm(p, "pol/final_ln", cfg.dim)
    nn.init_linear(p, rng, "pol/head1", cfg.dim, cfg.dim)
    nn.init_linear(p, rng, "pol/head2", cfg.dim, ACTION_DIM)
    return p


def embed_inputs(
    features: Tensor | np.ndarray,
    proprio: np.ndarray,
    past_actions: np.ndarray,
    valid: np.ndarray,
    params: dict,
    cfg: PolicyConfig,
) -> ContextWindow:
    """Build the slot sequence for a batch of windows.

    features: (B, C, K, d) fused per-camera vectors; proprio: (B, C, 4);
    past_actions: (B, C, 8) with the current step's entry ignored (its slot is
    the learned placeholder); valid: (B, C) 0/1, current step last.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    b, c, k, d = feats.shape
    if c > cfg.context:
        raise ValueError(f"window has {c} steps, config context is {cfg.context}")
    if d != cfg.dim or k != cfg.cameras:
        raise ValueError(
            f"features shaped {feats.shape}, expected (*, {cfg.context}, "
            f"{cfg.cameras}, {cfg.dim})"
        )
    proprio = np.asarray(proprio, dtype=np.float32)
    past_actions = np.asarray(past_actions, dtype=np.float32)
    valid = np.asarray(valid, dtype=np.float32)

    # each proprio scalar gets its own affine map to d
    z = Tensor(proprio[:, :, :, None]) * params["pol/proprio_w"] + params["pol/proprio_b"]

    # past actions for steps before the last; placeholder at the current step
    f_hist = nn.linear(
        T.reshape(Tensor(past_actions[:, : c - 1]), (b * (c - 1), ACTION_DIM)),
        params,
        "pol/act_embed",
    )
    f_hist = T.reshape(f_hist, (b, c - 1, 1, cfg.dim))
    placeholder = T.reshape(params["pol/act_placeholder"], (1, 1, 1, cfg.dim))
    ones = Tensor(np.ones((b, 1, 1, 1), dtype=np.float32))
    f_cur = placeholder * ones
    f = T.concat([f_hist, f_cur], axis=1) if c > 1 else f_cur

    slots = T.concat([feats, z, f], axis=2)  # (B, C, K+5, d)
    vmask = Tensor(valid[:, :, None, None])
    pad = T.reshape(params["pol/pad"], (1, 1, 1, cfg.dim))
    slots = slots * vmask + pad * (Tensor(np.float32(1.0)) - vmask)
    slots = T.reshape(slots, (b, c * cfg.slots_per_step, cfg.dim))
    return ContextWindow(slots=slots, valid=valid)


def _block_causal_bias(cfg: PolicyConfig, c: int, valid: np.ndarray) -> Tensor:
    """(B, 1, T, T) additive bias: query slots of step i may attend key slots
    of steps <= i, and only valid steps may be attended."""
    sps = cfg.slots_per_step
    steps = np.repeat(np.arange(c), sps)
    causal = np.where(steps[None, :] <= steps[:, None], 0.0, -1e9).astype(np.float32)
    key_ok = np.repeat(np.asarray(valid, dtype=np.float32), sps, axis=1)  # (B, T)
    key_bias = (1.0 - key_ok) * np.float32(-1e9)
    bias = causal[None, None, :, :] + key_bias[:, None, None, :]
    return Tensor(bias)


def policy_forward(window: ContextWindow, params: dict, cfg: PolicyConfig) -> PredictedAction:
    slots, valid = window.slots, window.valid
    b, t, d = slots.shape
    c = t // cfg.slots_per_step
    x = slots + T.slice_(params["pol/pos"], (0, 0), (t, d))
    bias = _block_causal_bias(cfg, c, valid)
    for i in range(cfg.depth):
        x = nn.transformer_block(x, params, f"pol/blk{i}", cfg.heads, bias)
    x = nn.layernorm_affine(x, params, "pol/final_ln")
    readout = T.reshape(T.slice_(x, (0, t - 1, 0), (b, 1, d)), (b, d))
    h = T.gelu(nn.linear(readout, params, "pol/head1"))
    return PredictedAction(raw=nn.linear(h, params, "pol/head2"))


def bc_loss(window: ContextWindow, targets: np.ndarray, params: dict,
            cfg: PolicyConfig) -> Tensor:
    """Mean squared error between the raw head output and the expert action."""
    targets = np.asarray(targets, dtype=np.float32)
    if targets.ndim != 2 or targets.shape[0] == 0:
        raise ValueError(f"bc_loss: need a non-empty (B, 8) target batch, got {targets.shape}")
    if targets.shape[1] != ACTION_DIM:
        raise ValueError(f"bc_loss: targets must be {ACTION_DIM}-dim, got {targets.shape}")
    if (targets[:, 3] < 0).any():
        raise ValueError("bc_loss: target quaternions must be canonical (scalar >= 0)")
    g = targets[:, 7]
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("bc_loss: target gripper values must be 0 or 1")
    pred = policy_forward(window, params, cfg)
    return T.mse(pred.raw, Tensor(targets))
