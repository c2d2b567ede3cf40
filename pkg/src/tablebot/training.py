"""Behavioral-cloning training, encoder pretraining, and image augmentation."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import policy as pol
from . import tensor as T
from .blockworld.data import LoadedEpisode, load_pretrain_corpus
from .checkpoint import save_training_state
from .optim import AdamWState, adamw_step, global_grad_norm, warmup_lr
from .policy import PolicyConfig
from .tensor import Tape, Tensor, backward
from .text import Vocabulary, encode as encode_text
from .encoder import EncoderConfig

log = logging.getLogger(__name__)

try:
    _libc = ctypes.CDLL(ctypes.util.find_library("c"))
except (OSError, TypeError):  # pragma: no cover
    _libc = None
_TRIM_EVERY = 200


def _release_heap() -> None:
    """Hand freed allocator pages back to the OS; the per-step tensor churn
    otherwise grows resident memory without bound on glibc."""
    if _libc is not None and hasattr(_libc, "malloc_trim"):
        _libc.malloc_trim(0)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 100
    batch_size: int = 64
    iterations: int = 10_000
    jitter: float = 0.05
    seed: int = 0
    deterministic: bool = True
    encoder_init: str = "scratch"  # or a checkpoint path
    freeze_encoder: bool = False
    instructions: str = "on"  # "off" trains with all-<pad> instructions
    multiscale: str = "concat_all"
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.iterations <= 0:
            raise ValueError("lr, batch_size and iterations must be positive")
        if not 0.0 <= self.jitter <= 0.5:
            raise ValueError(f"jitter must be in [0, 0.5], got {self.jitter}")
        if self.instructions not in ("on", "off"):
            raise ValueError(f"instructions must be 'on' or 'off', got {self.instructions!r}")


@dataclass
class MetricsLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step: int, loss: float, grad_norm: float, seconds: float) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("metrics steps must be strictly increasing")
        self.rows.append((step, loss, grad_norm, seconds))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["step,loss,grad_norm,seconds"]
        for step, loss, gn, secs in self.rows:
            lines.append(f"{step},{loss:.6g},{gn:.6g},{secs:.3f}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def augment(image: np.ndarray, magnitude: float, seed: int) -> np.ndarray:
    """Additive per-channel color jitter in [0,1] space, clamped."""
    if not 0.0 <= magnitude <= 0.5:
        raise ValueError(f"augment: magnitude must be in [0, 0.5], got {magnitude}")
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255.0)
    if magnitude == 0.0:
        return img.astype(np.float32, copy=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 3]))
    offs = rng.uniform(-magnitude, magnitude, size=3).astype(np.float32)
    return np.clip(img + offs, 0.0, 1.0).astype(np.float32)


def _augment_batch(images: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    imgs = images.astype(np.float32) / np.float32(255.0)
    if magnitude == 0.0:
        return imgs
    n = imgs.shape[0]
    offs = rng.uniform(-magnitude, magnitude, size=(n, 1, 1, 3)).astype(np.float32)
    return np.clip(imgs + offs, 0.0, 1.0)


# ---------------------------------------------------------------------------
# window assembly


@dataclass
class WindowBatch:
    images: np.ndarray  # uint8 (Nv*K, H, W, 3) for valid steps only
    token_ids: np.ndarray  # (Nv*K, n_max)
    true_lens: np.ndarray  # (Nv*K,)
    gather_ids: np.ndarray  # (B*C*K,) rows into the encoded table (last row = invalid)
    proprio: np.ndarray  # (B, C, 4)
    past_actions: np.ndarray  # (B, C, 8)
    valid: np.ndarray  # (B, C)
    targets: np.ndarray  # (B, 8)


def assemble_windows(
    episodes: list[LoadedEpisode],
    picks: list[tuple[int, int]],
    context: int,
    tokens_by_episode: list[tuple[np.ndarray, int]],
) -> WindowBatch:
    """Gather up-to-`context` trailing steps for each (episode, t) pick.
    Only valid steps contribute encoder work; earlier slots are masked."""
    b = len(picks)
    k = episodes[0].images.shape[1]
    n_max = tokens_by_episode[0][0].shape[0]
    h = episodes[0].images.shape[2]

    valid = np.zeros((b, context), dtype=np.float32)
    proprio = np.zeros((b, context, 4), dtype=np.float32)
    past_actions = np.zeros((b, context, 8), dtype=np.float32)
    targets = np.zeros((b, 8), dtype=np.float32)
    img_list = []
    tok_list = []
    len_list = []
    gather = np.zeros((b, context, k), dtype=np.int64)
    nv = 0
    for bi, (ei, t) in enumerate(picks):
        ep = episodes[ei]
        ids, tlen = tokens_by_episode[ei]
        targets[bi] = ep.actions[t]
        for ci in range(context):
            step = t - (context - 1) + ci
            if step < 0:
                continue
            valid[bi, ci] = 1.0
            proprio[bi, ci] = ep.proprio[step]
            if step < t:
                past_actions[bi, ci] = ep.actions[step]
            img_list.append(ep.images[step])
            for kk in range(k):
                gather[bi, ci, kk] = nv * k + kk
            tok_list.append(np.broadcast_to(ids[None], (k, n_max)))
            len_list.append(np.full(k, tlen, dtype=np.int64))
            nv += 1
    invalid_row = nv * k
    flat_gather = np.where(
        np.repeat(valid.reshape(b, context, 1), k, axis=2) > 0, gather, invalid_row
    ).reshape(-1)
    images = np.concatenate(img_list, axis=0) if img_list else np.zeros(
        (0, h, h, 3), dtype=np.uint8
    )
    token_ids = (
        np.concatenate(tok_list, axis=0) if tok_list else np.zeros((0, n_max), dtype=np.int64)
    )
    true_lens = (
        np.concatenate(len_list, axis=0) if len_list else np.zeros((0,), dtype=np.int64)
    )
    return WindowBatch(
        images=images,
        token_ids=token_ids,
        true_lens=true_lens,
        gather_ids=flat_gather,
        proprio=proprio,
        past_actions=past_actions,
        valid=valid,
        targets=targets,
    )


def bc_forward_loss(
    batch: WindowBatch,
    images_f32: np.ndarray,
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    pol_cfg: PolicyConfig,
    selection: str,
) -> Tensor:
    """End-to-end loss: encode valid steps, scatter into windows, policy MSE."""
    b, c = batch.valid.shape
    k = pol_cfg.cameras
    pooled = enc.encode_batch(
        images_f32, batch.token_ids, batch.true_lens, params, enc_cfg
    )
    stack = enc.FeatureStack(vectors=pooled, depth=enc_cfg.depth)
    h = enc.multiscale(stack, selection, params)  # (Nv*K, d_p)
    table = T.concat([h, Tensor(np.zeros((1, pol_cfg.dim), dtype=np.float32))], axis=0)
    feats = T.reshape(T.embedding_lookup(table, batch.gather_ids), (b, c, k, pol_cfg.dim))
    window = pol.embed_inputs(
        feats, batch.proprio, batch.past_actions, batch.valid, params, pol_cfg
    )
    return pol.bc_loss(window, batch.targets, params, pol_cfg)


# ---------------------------------------------------------------------------
# training loops


def _episode_tokens(
    episodes: list[LoadedEpisode], vocab: Vocabulary, n_max: int, instructions: str
) -> list[tuple[np.ndarray, int]]:
    out = []
    for ep in episodes:
        if instructions == "off":
            out.append((np.zeros(n_max, dtype=np.int32), 0))
        else:
            seq = encode_text(ep.instruction, vocab, n_max)
            out.append((seq.ids, seq.true_length))
    return out


def init_bc_params(
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    pol_cfg: PolicyConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    params = enc.init_encoder_params(enc_cfg, rng, len(vocab))
    if cfg.encoder_init not in ("scratch",):
        from .checkpoint import load_checkpoint

        arrays, _ = load_checkpoint(cfg.encoder_init)
        loaded = 0
        for name, arr in arrays.items():
            if name.startswith("enc/") and name in params:
                if params[name].shape != arr.shape:
                    raise ValueError(
                        f"encoder init: {name} shape {arr.shape} != {params[name].shape}"
                    )
                params[name] = Tensor(arr, requires_grad=True)
                loaded += 1
        if loaded == 0:
            raise ValueError(f"encoder init: no enc/* arrays found in {cfg.encoder_init}")
    params.update(enc.init_multiscale_params(enc_cfg, cfg.multiscale, pol_cfg.dim, rng))
    params.update(pol.init_policy_params(pol_cfg, rng))
    if cfg.freeze_encoder:
        for name, p in params.items():
            if name.startswith("enc/"):
                p.requires_grad = False
    return params


def train_bc(
    episodes: list[LoadedEpisode],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    pol_cfg: PolicyConfig,
    vocab: Vocabulary,
    out_dir: str | Path,
) -> tuple[dict[str, Tensor], MetricsLog, Path]:
    """Behavioral cloning over expert episodes; returns (params, metrics,
    final checkpoint path)."""
    if not episodes:
        raise ValueError("train_bc: no episodes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T.set_deterministic(cfg.deterministic)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    params = init_bc_params(cfg, enc_cfg, pol_cfg, vocab, rng)
    tokens = _episode_tokens(episodes, vocab, enc_cfg.text_len, cfg.instructions)
    trainable = {
        name for name in params
        if not (cfg.freeze_encoder and name.startswith("enc/"))
    }
    opt = AdamWState()
    metrics = MetricsLog()
    meta = checkpoint_meta(cfg, enc_cfg, pol_cfg)
    t_start = time.time()
    ep_lengths = np.array([ep.images.shape[0] for ep in episodes])

    for it in range(cfg.iterations):
        step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, 7]))
        ep_idx = step_rng.integers(0, len(episodes), size=cfg.batch_size)
        t_idx = (step_rng.random(cfg.batch_size) * ep_lengths[ep_idx]).astype(np.int64)
        picks = list(zip(ep_idx.tolist(), t_idx.tolist()))
        batch = assemble_windows(episodes, picks, pol_cfg.context, tokens)
        images_f32 = _augment_batch(batch.images, cfg.jitter, step_rng)

        with Tape():
            loss = bc_forward_loss(batch, images_f32, params, enc_cfg, pol_cfg,
                                   cfg.multiscale)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise RuntimeError(f"train_bc: non-finite loss at step {it}")
            grads = backward(loss)
        named = {n: grads[params[n]].data for n in trainable if params[n] in grads}
        gnorm = global_grad_norm(named)
        lr = warmup_lr(cfg.lr, it, cfg.warmup_steps)
        adamw_step(params, named, opt, lr, cfg.weight_decay, cfg.beta1, cfg.beta2)

        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            metrics.append(it, loss_val, gnorm, time.time() - t_start)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and (
            it + 1 < cfg.iterations
        ):
            save_training_state(out_dir / f"ckpt_step{it + 1}.itrl", params, opt, meta)
        if (it + 1) % _TRIM_EVERY == 0:
            _release_heap()

    ckpt = out_dir / "checkpoint.itrl"
    save_training_state(ckpt, params, opt, meta)
    metrics.save(out_dir / "metrics.csv")
    return params, metrics, ckpt


def checkpoint_meta(cfg: TrainConfig, enc_cfg: EncoderConfig,
                    pol_cfg: PolicyConfig | None = None) -> dict[str, str]:
    meta = {
        "preset": enc_cfg.preset,
        "fusion": enc_cfg.fusion,
        "dim": str(enc_cfg.dim),
        "depth": str(enc_cfg.depth),
        "heads": str(enc_cfg.heads),
        "patch": str(enc_cfg.patch),
        "text_len": str(enc_cfg.text_len),
        "mlp_ratio": str(enc_cfg.mlp_ratio),
        "multiscale": cfg.multiscale,
        "instructions": cfg.instructions,
    }
    if pol_cfg is not None:
        meta.update(
            {
                "policy_dim": str(pol_cfg.dim),
                "policy_depth": str(pol_cfg.depth),
                "policy_heads": str(pol_cfg.heads),
                "context": str(pol_cfg.context),
                "cameras": str(pol_cfg.cameras),
            }
        )
    return meta


def configs_from_meta(meta: dict[str, str]) -> tuple[EncoderConfig, PolicyConfig | None, str, str]:
    try:
        enc_cfg = EncoderConfig(
            dim=int(meta["dim"]),
            depth=int(meta["depth"]),
            heads=int(meta["heads"]),
            patch=int(meta["patch"]),
            text_len=int(meta["text_len"]),
            mlp_ratio=int(meta["mlp_ratio"]),
            fusion=meta["fusion"],
            preset=meta["preset"],
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint has no model config header (missing {exc})") from exc
    pol_cfg = None
    if "policy_dim" in meta:
        pol_cfg = PolicyConfig(
            dim=int(meta["policy_dim"]),
            depth=int(meta["policy_depth"]),
            heads=int(meta["policy_heads"]),
            context=int(meta["context"]),
            cameras=int(meta["cameras"]),
        )
    return enc_cfg, pol_cfg, meta.get("multiscale", "concat_all"), meta.get("instructions", "on")


def pretrain_encoder(
    corpus_path: str | Path,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
    out_dir: str | Path,
) -> tuple[dict[str, Tensor], MetricsLog, Path]:
    """Masked-autoencoder pretraining over (scene image, caption) pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T.set_deterministic(cfg.deterministic)
    images, captions = load_pretrain_corpus(corpus_path)
    if len(captions) == 0:
        raise ValueError("pretrain_encoder: empty corpus")
    seqs = [encode_text(c, vocab, enc_cfg.text_len) for c in captions]
    all_ids = np.stack([s.ids for s in seqs]).astype(np.int64)
    all_lens = np.array([s.true_length for s in seqs], dtype=np.int64)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    params = enc.init_encoder_params(enc_cfg, rng, len(vocab))
    params.update(enc.init_decoder_params(enc_cfg, rng, len(vocab)))
    opt = AdamWState()
    metrics = MetricsLog()
    t_start = time.time()

    for it in range(cfg.iterations):
        step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, 9]))
        idx = step_rng.integers(0, len(captions), size=cfg.batch_size)
        mask_seed = int(step_rng.integers(1 << 30))
        with Tape():
            loss = enc.mae_pretrain_loss(
                images[idx], all_ids[idx], all_lens[idx], params, enc_cfg, mask_seed
            )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise RuntimeError(f"pretrain_encoder: non-finite loss at step {it}")
            grads = backward(loss)
        named = {n: grads[p].data for n, p in params.items() if p in grads}
        gnorm = global_grad_norm(named)
        lr = warmup_lr(cfg.lr, it, cfg.warmup_steps)
        adamw_step(params, named, opt, lr, cfg.weight_decay, cfg.beta1, cfg.beta2)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            metrics.append(it, loss_val, gnorm, time.time() - t_start)
        if (it + 1) % _TRIM_EVERY == 0:
            _release_heap()

    meta = checkpoint_meta(cfg, enc_cfg)
    ckpt = out_dir / "encoder.itrl"
    save_training_state(ckpt, params, opt, meta)
    metrics.save(out_dir / "pretrain_metrics.csv")
    return params, metrics, ckpt
