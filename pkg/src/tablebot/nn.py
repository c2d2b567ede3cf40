"""Shared transformer machinery built on the tensor primitives: linear layers,
pre-norm attention blocks, and masked sequence pooling."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_linear(params: dict, rng: np.random.Generator, name: str, din: int, dout: int,
                std: float | None = None) -> None:
    # Glorot by default: tiny fixed stds starve the gradient path through
    # attention (two 0.02-scale projections in series) and stall feature learning
    if std is None:
        std = float(np.sqrt(2.0 / (din + dout)))
    params[f"{name}/w"] = T.normal_param(rng, (din, dout), std)
    params[f"{name}/b"] = T.zeros_param((dout,))


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    # flatten leading dims: a plain 2-d gemm keeps the weight gradient a single
    # gemm too (batched 3d @ 2d would build a per-batch outer product and sum)
    w, b = params[f"{name}/w"], params[f"{name}/b"]
    if x.ndim == 2:
        return T.matmul(x, w) + b
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1]))
    out = T.matmul(flat, w) + b
    return T.reshape(out, (*lead, w.shape[-1]))


def init_layernorm(params: dict, name: str, d: int) -> None:
    params[f"{name}/s"] = T.ones_param((d,))
    params[f"{name}/b"] = T.zeros_param((d,))


def layernorm_affine(x: Tensor, params: dict, name: str) -> Tensor:
    return T.layernorm(x, axis=-1, eps=1e-5) * params[f"{name}/s"] + params[f"{name}/b"]


def init_block(params: dict, rng: np.random.Generator, prefix: str, d: int,
               mlp_ratio: int = 4) -> None:
    init_layernorm(params, f"{prefix}/ln1", d)
    init_linear(params, rng, f"{prefix}/qkv", d, 3 * d)
    init_linear(params, rng, f"{prefix}/attn_out", d, d)
    init_layernorm(params, f"{prefix}/ln2", d)
    init_linear(params, rng, f"{prefix}/mlp1", d, mlp_ratio * d)
    init_linear(params, rng, f"{prefix}/mlp2", mlp_ratio * d, d)


def transformer_block(x: Tensor, params: dict, prefix: str, heads: int,
                      mask_bias: Tensor | None = None) -> Tensor:
    """Pre-norm block: x + attn(ln(x)) then x + mlp(ln(x)).

    mask_bias broadcasts against the (B, heads, S, S) score tensor; forbidden
    pairs carry a large negative value (finite, so softmax stays NaN-free).
    """
    b, s, d = x.shape
    hd = d // heads
    h = layernorm_affine(x, params, f"{prefix}/ln1")
    qkv = linear(h, params, f"{prefix}/qkv")  # (B, S, 3d)
    q = T.slice_(qkv, (0, 0, 0), (b, s, d))
    k = T.slice_(qkv, (0, 0, d), (b, s, d))
    v = T.slice_(qkv, (0, 0, 2 * d), (b, s, d))

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, s, heads, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * Tensor(np.float32(1.0 / np.sqrt(hd)))
    if mask_bias is not None:
        scores = scores + mask_bias
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, H, S, hd)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    x = x + linear(ctx, params, f"{prefix}/attn_out")
    h2 = layernorm_affine(x, params, f"{prefix}/ln2")
    return x + linear(T.gelu(linear(h2, params, f"{prefix}/mlp1")), params, f"{prefix}/mlp2")


def key_mask_bias(key_valid: np.ndarray) -> Tensor:
    """(B, S) 0/1 key validity -> additive (B, 1, 1, S) attention bias."""
    bias = (1.0 - np.asarray(key_valid, dtype=np.float32)) * np.float32(-1e9)
    return Tensor(bias[:, None, None, :])


def masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over sequence positions where valid==1. valid: (B, S) 0/1."""
    b, s, d = x.shape
    m = np.asarray(valid, dtype=np.float32)
    counts = np.maximum(m.sum(axis=1, keepdims=True), 1.0)  # (B, 1)
    weighted = x * Tensor(m[:, :, None])
    return T.mean(weighted, axis=1) * Tensor(np.float32(s) / counts)
