"""Multimodal transformer encoder.

Image patches and instruction tokens are embedded, concatenated along the
sequence axis and run through pre-norm blocks; after every block the sequence
is average-pooled (text padding excluded) to give one vector per layer, plus a
final pooled vector after the closing layernorm. Three fusion strategies share
this skeleton, and a masked-autoencoder objective pretrains the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .text import MASK_ID, TokenSeq, positions_1d

FUSION_MODES = ("joint", "concat", "film")
MULTISCALE_SELECTIONS = (
    "last",
    "second_to_last",
    "concat_last_half",
    "concat_first_half",
    "concat_all",
)
# preset name -> (embed dim, depth)
PRESETS = {"tiny": (32, 2), "small": (64, 4), "medium": (128, 6), "large": (192, 8)}


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 8
    image_size: int = 32
    text_len: int = 32
    mlp_ratio: int = 4
    fusion: str = "joint"
    preset: str = "small"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch != 0:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % 4 != 0:
            raise ValueError(f"dim {self.dim} must be divisible by 4 for 2d positions")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "EncoderConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}, expected one of {tuple(PRESETS)}")
        dim, depth = PRESETS[name]
        cfg = cls(dim=dim, depth=depth, heads=max(2, dim // 16), preset=name)
        return replace(cfg, **overrides) if overrides else cfg


@dataclass
class FeatureStack:
    """Per-layer pooled features: depth vectors plus the final pooled vector,
    each of shape (K, d) for K cameras (or (B, d) in batched use)."""

    vectors: list[Tensor]
    depth: int

    def __post_init__(self):
        assert len(self.vectors) == self.depth + 1, (
            f"feature stack needs depth+1 vectors, got {len(self.vectors)}"
        )

    @property
    def final(self) -> Tensor:
        return self.vectors[-1]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) image(s) -> (..., l_c, 3*P*P) raster-order patches.
    uint8 input is scaled to [0, 1] floats."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255.0)
    images = images.astype(np.float32, copy=False)
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image dims ({h}, {w}) not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, patch: int, image_size: int = 32) -> np.ndarray:
    """Inverse of patchify on float images."""
    patches = np.asarray(patches, dtype=np.float32)
    *lead, l, pd = patches.shape
    gh = gw = image_size // patch
    if l != gh * gw or pd != 3 * patch * patch:
        raise ValueError(f"patch block ({l}, {pd}) does not match image size {image_size}")
    x = patches.reshape(*lead, gh, gw, patch, patch, 3)
    x = np.moveaxis(x, -3, -4)  # (..., gh, patch, gw, patch, 3)
    return np.ascontiguousarray(x.reshape(*lead, image_size, image_size, 3))


def positions_2d(grid: int, d: int) -> np.ndarray:
    """Fixed 2D sin-cos embeddings: half the channels encode the row index,
    half the column index, each with interleaved sin/cos."""
    half = d // 2
    rows = positions_1d(grid, half)
    cols = positions_1d(grid, half)
    out = np.zeros((grid * grid, d), dtype=np.float32)
    for r in range(grid):
        for c in range(grid):
            out[r * grid + c, :half] = rows[r]
            out[r * grid + c, half:] = cols[c]
    return out


# ---------------------------------------------------------------------------
# parameters


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        vocab_size: int) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    nn.init_linear(p, rng, "enc/patch", cfg.patch_dim, cfg.dim)
    p["enc/tok"] = T.normal_param(rng, (vocab_size, cfg.dim))
    p["enc/mod_img"] = T.normal_param(rng, (cfg.dim,))
    p["enc/mod_txt"] = T.normal_param(rng, (cfg.dim,))
    for i in range(cfg.depth):
        nn.init_block(p, rng, f"enc/blk{i}", cfg.dim, cfg.mlp_ratio)
    nn.init_layernorm(p, "enc/final_ln", cfg.dim)
    if cfg.fusion == "concat":
        nn.init_linear(p, rng, "enc/cat", 2 * cfg.dim, cfg.dim)
    if cfg.fusion == "film":
        for i in range(cfg.depth):
            # zero init: modulation starts as the identity (gamma=1, beta=0)
            p[f"enc/film{i}/gamma_w"] = T.zeros_param((cfg.dim, cfg.dim))
            p[f"enc/film{i}/beta_w"] = T.zeros_param((cfg.dim, cfg.dim))
    return p


def init_decoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        vocab_size: int, depth: int = 2) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["dec/mask_tok"] = T.normal_param(rng, (1, cfg.dim))
    for i in range(depth):
        nn.init_block(p, rng, f"dec/blk{i}", cfg.dim, cfg.mlp_ratio)
    nn.init_layernorm(p, "dec/final_ln", cfg.dim)
    nn.init_linear(p, rng, "dec/img_head", cfg.dim, cfg.patch_dim)
    nn.init_linear(p, rng, "dec/txt_head", cfg.dim, vocab_size)
    return p


def init_multiscale_params(cfg: EncoderConfig, selection: str, policy_dim: int,
                           rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    nn.init_linear(p, rng, "ms/proj", selection_dim(cfg, selection), policy_dim)
    return p


def selection_dim(cfg: EncoderConfig, selection: str) -> int:
    if selection not in MULTISCALE_SELECTIONS:
        raise ValueError(
            f"unknown layer selection {selection!r}, expected one of {MULTISCALE_SELECTIONS}"
        )
    if selection in ("last", "second_to_last"):
        return cfg.dim
    if selection == "concat_all":
        return cfg.depth * cfg.dim
    return (cfg.depth // 2) * cfg.dim


# ---------------------------------------------------------------------------
# forward passes


def _embed_patches(patches_t: Tensor, pos: np.ndarray, params: dict,
                   cfg: EncoderConfig) -> Tensor:
    b, l, pd = patches_t.shape
    x = nn.linear(T.reshape(patches_t, (b * l, pd)), params, "enc/patch")
    x = T.reshape(x, (b, l, cfg.dim))
    return x + Tensor(pos[None]) + params["enc/mod_img"]


def _embed_text(token_ids: np.ndarray, n_used: int, params: dict,
                cfg: EncoderConfig) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)[:, :n_used]
    x = T.embedding_lookup(params["enc/tok"], ids)
    pos = positions_1d(cfg.text_len, cfg.dim)[:n_used]
    return x + Tensor(pos[None]) + params["enc/mod_txt"]


def _run_blocks(x: Tensor, key_valid: np.ndarray, params: dict, cfg: EncoderConfig,
                film_scales: list[tuple[Tensor, Tensor]] | None = None) -> list[Tensor]:
    """Run all blocks; returns depth+1 pooled vectors (one per block plus the
    final-norm pooled output). Pooling and attention ignore invalid keys."""
    bias = nn.key_mask_bias(key_valid) if (key_valid < 0.5).any() else None
    pooled: list[Tensor] = []
    for i in range(cfg.depth):
        x = nn.transformer_block(x, params, f"enc/blk{i}", cfg.heads, bias)
        if film_scales is not None:
            gamma, beta = film_scales[i]
            x = x * T.reshape(gamma, (gamma.shape[0], 1, gamma.shape[1])) + T.reshape(
                beta, (beta.shape[0], 1, beta.shape[1])
            )
        pooled.append(nn.masked_mean(x, key_valid))
    final = nn.layernorm_affine(x, params, "enc/final_ln")
    pooled.append(nn.masked_mean(final, key_valid))
    return pooled


def _text_key_valid(true_lens: np.ndarray, n_used: int) -> np.ndarray:
    return (np.arange(n_used)[None, :] < np.asarray(true_lens)[:, None]).astype(np.float32)


def encode_batch(
    images: np.ndarray | Tensor,
    token_ids: np.ndarray,
    true_lens: np.ndarray,
    params: dict,
    cfg: EncoderConfig,
) -> list[Tensor]:
    """Batched core of encode(): (B, H, W, 3) images plus (B, n_max) token ids
    -> depth+1 pooled vectors of shape (B, d).

    Trailing all-pad text columns are dropped before the blocks run; masked
    attention and masked pooling make the result identical to the full-length
    computation, so this is purely a speed measure.
    """
    if isinstance(images, Tensor):
        patches_t = images  # pre-patchified (B, l_c, patch_dim) tensor input
    else:
        patches_t = Tensor(patchify(images, cfg.patch))
    b = patches_t.shape[0]
    true_lens = np.asarray(true_lens)
    n_used = int(true_lens.max()) if true_lens.size else 0
    pos2d = positions_2d(cfg.image_size // cfg.patch, cfg.dim)

    img_x = _embed_patches(patches_t, pos2d, params, cfg)
    img_valid = np.ones((b, cfg.num_patches), dtype=np.float32)

    if cfg.fusion == "joint":
        if n_used == 0:
            return _run_blocks(img_x, img_valid, params, cfg)
        txt_x = _embed_text(token_ids, n_used, params, cfg)
        x = T.concat([img_x, txt_x], axis=1)
        key_valid = np.concatenate([img_valid, _text_key_valid(true_lens, n_used)], axis=1)
        return _run_blocks(x, key_valid, params, cfg)

    if cfg.fusion == "concat":
        img_pooled, txt_pooled = _encode_branches(
            img_x, img_valid, token_ids, true_lens, n_used, params, cfg
        )
        out = []
        for iv, tv in zip(img_pooled, txt_pooled):
            out.append(nn.linear(T.concat([iv, tv], axis=-1), params, "enc/cat"))
        return out

    # film: text summary modulates image features after every block
    if n_used == 0:
        summary = Tensor(np.zeros((b, cfg.dim), dtype=np.float32))
    else:
        txt_x = _embed_text(token_ids, n_used, params, cfg)
        summary = nn.masked_mean(txt_x, _text_key_valid(true_lens, n_used))
    ones = Tensor(np.ones((b, cfg.dim), dtype=np.float32))
    film_scales = []
    for i in range(cfg.depth):
        gamma = T.matmul(summary, params[f"enc/film{i}/gamma_w"]) + ones
        beta = T.matmul(summary, params[f"enc/film{i}/beta_w"])
        film_scales.append((gamma, beta))
    return _run_blocks(img_x, img_valid, params, cfg, film_scales=film_scales)


def _encode_branches(img_x, img_valid, token_ids, true_lens, n_used, params, cfg):
    """Concat fusion runs the encoder twice: image-only and text-only."""
    img_pooled = _run_blocks(img_x, img_valid, params, cfg)
    b = img_x.shape[0]
    if n_used == 0:
        zero = Tensor(np.zeros((b, cfg.dim), dtype=np.float32))
        txt_pooled = [zero] * (cfg.depth + 1)
    else:
        txt_x = _embed_text(token_ids, n_used, params, cfg)
        txt_pooled = _run_blocks(txt_x, _text_key_valid(true_lens, n_used), params, cfg)
    return img_pooled, txt_pooled


def encode(images: np.ndarray, tokens: TokenSeq, params: dict,
           cfg: EncoderConfig) -> FeatureStack:
    """Encode K camera images jointly with one instruction; returns the
    per-layer pooled features, shape (K, d) each."""
    images = np.asarray(images)
    k = images.shape[0]
    ids = np.broadcast_to(tokens.ids[None], (k, tokens.ids.shape[0]))
    lens = np.full((k,), tokens.true_length, dtype=np.int64)
    vectors = encode_batch(images, ids, lens, params, cfg)
    return FeatureStack(vectors=vectors, depth=cfg.depth)


def select_features(stack: FeatureStack, selection: str) -> Tensor:
    """Concatenate the selected per-layer vectors (no projection)."""
    if selection not in MULTISCALE_SELECTIONS:
        raise ValueError(
            f"unknown layer selection {selection!r}, expected one of {MULTISCALE_SELECTIONS}"
        )
    vs, depth = stack.vectors, stack.depth
    if selection == "last":
        return vs[-1]
    if selection == "second_to_last":
        return vs[-2]
    if selection == "concat_all":
        chosen = vs[:depth]
    elif selection == "concat_last_half":
        chosen = vs[depth - depth // 2 : depth]
    else:  # concat_first_half
        chosen = vs[: depth // 2]
    return T.concat(chosen, axis=-1) if len(chosen) > 1 else chosen[0]


def multiscale(stack: FeatureStack, selection: str, params: dict) -> Tensor:
    """Selected features projected to the policy width."""
    return nn.linear(select_features(stack, selection), params, "ms/proj")


# ---------------------------------------------------------------------------
# masked-autoencoder pretraining


def mae_pretrain_loss(
    images: np.ndarray,
    token_ids: np.ndarray,
    true_lens: np.ndarray,
    params: dict,
    cfg: EncoderConfig,
    mask_seed: int,
    img_mask_ratio: float = 0.75,
    text_mask_ratio: float = 0.75,
) -> Tensor:
    """Reconstruction loss: MSE on per-patch-normalized pixels of masked
    patches plus 0.5 x cross-entropy on masked text tokens.

    Masked patches are dropped from the encoder sequence (mask tokens are
    reinserted for the decoder); masked text ids are replaced by <mask>.
    At least one patch and one text token stay visible.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    token_ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    true_lens = np.atleast_1d(np.asarray(true_lens, dtype=np.int64))
    b = images.shape[0]
    l = cfg.num_patches
    rng = np.random.default_rng(np.random.SeedSequence([int(mask_seed) & 0x7FFFFFFF, 23]))

    patches = patchify(images, cfg.patch)  # (B, L, D) constant
    n_masked_img = min(int(l * img_mask_ratio), l - 1)
    n_vis = l - n_masked_img
    vis_idx = np.empty((b, n_vis), dtype=np.int64)
    img_masked = np.zeros((b, l), dtype=np.float32)
    for i in range(b):
        perm = rng.permutation(l)
        vis_idx[i] = np.sort(perm[:n_vis])
        img_masked[i, perm[n_vis:]] = 1.0

    # text masking: replace ids with <mask> among the first true_len positions
    n_used = max(int(true_lens.max()), 1)
    ids_in = token_ids[:, :n_used].copy()
    txt_masked = np.zeros((b, n_used), dtype=np.float32)
    for i in range(b):
        n = int(true_lens[i])
        n_mask = int(n * text_mask_ratio)
        if n > 0 and n_mask > 0:
            chosen = rng.permutation(n)[:n_mask]
            ids_in[i, chosen] = MASK_ID
            txt_masked[i, chosen] = 1.0

    # encoder over visible patches + masked text
    pos2d = positions_2d(cfg.image_size // cfg.patch, cfg.dim)
    pv = np.take_along_axis(patches, vis_idx[:, :, None], axis=1)
    x_img = nn.linear(T.reshape(Tensor(pv), (b * n_vis, cfg.patch_dim)), params, "enc/patch")
    x_img = T.reshape(x_img, (b, n_vis, cfg.dim)) + Tensor(pos2d[vis_idx]) + params["enc/mod_img"]
    x_txt = _embed_text(ids_in, n_used, params, cfg)
    x = T.concat([x_img, x_txt], axis=1)
    txt_valid = _text_key_valid(true_lens, n_used)
    key_valid = np.concatenate([np.ones((b, n_vis), dtype=np.float32), txt_valid], axis=1)
    bias = nn.key_mask_bias(key_valid) if (key_valid < 0.5).any() else None
    for i in range(cfg.depth):
        x = nn.transformer_block(x, params, f"enc/blk{i}", cfg.heads, bias)
    x = nn.layernorm_affine(x, params, "enc/final_ln")

    # decoder: scatter visible outputs back, mask tokens elsewhere
    enc_img = T.reshape(T.slice_(x, (0, 0, 0), (b, n_vis, cfg.dim)), (b * n_vis, cfg.dim))
    enc_txt = T.slice_(x, (0, n_vis, 0), (b, n_used, cfg.dim))
    table = T.concat([enc_img, params["dec/mask_tok"]], axis=0)
    gather_ids = np.full((b, l), b * n_vis, dtype=np.int64)
    rows = np.repeat(np.arange(b), n_vis)
    gather_ids[rows, vis_idx.reshape(-1)] = np.arange(b * n_vis)
    dec_img = T.embedding_lookup(table, gather_ids) + Tensor(pos2d[None])
    dec_txt = enc_txt + Tensor(positions_1d(cfg.text_len, cfg.dim)[None, :n_used])
    y = T.concat([dec_img, dec_txt], axis=1)
    dec_valid = np.concatenate([np.ones((b, l), dtype=np.float32), txt_valid], axis=1)
    dec_bias = nn.key_mask_bias(dec_valid) if (dec_valid < 0.5).any() else None
    for i in range(2):
        y = nn.transformer_block(y, params, f"dec/blk{i}", cfg.heads, dec_bias)
    y = nn.layernorm_affine(y, params, "dec/final_ln")

    # pixel loss on masked patches against per-patch-normalized targets
    y_img = T.reshape(T.slice_(y, (0, 0, 0), (b, l, cfg.dim)), (b * l, cfg.dim))
    pred_px = T.reshape(nn.linear(y_img, params, "dec/img_head"), (b, l, cfg.patch_dim))
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    target = (patches - mu) / np.sqrt(var + 1e-6)
    n_masked_total = float(img_masked.sum())
    if n_masked_total > 0:
        m3 = Tensor(img_masked[:, :, None])
        scale = np.float32(b * l / n_masked_total)
        loss_px = T.mse(pred_px * m3, Tensor(target * img_masked[:, :, None])) * Tensor(scale)
    else:
        loss_px = Tensor(np.float32(0.0))

    # text loss on masked token positions
    if txt_masked.sum() > 0:
        y_txt = T.reshape(
            T.slice_(y, (0, l, 0), (b, n_used, cfg.dim)), (b * n_used, cfg.dim)
        )
        logits = nn.linear(y_txt, params, "dec/txt_head")
        loss_txt = T.cross_entropy(
            logits, token_ids[:, :n_used].reshape(-1), txt_masked.reshape(-1)
        )
    else:
        loss_txt = Tensor(np.float32(0.0))
    return loss_px + loss_txt * Tensor(np.float32(0.5))
