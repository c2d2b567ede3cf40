"""Closed-loop evaluation, seen/unseen splits, the ablation matrix runner,
and report emission."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import encoder as enc
from . import policy as pol
from .blockworld.camera import make_observation
from .blockworld.data import Dataset
from .blockworld.scene import Action, SceneState, TaskSpec, VariationSpec, reset, step
from .blockworld.tasks import expert_action, make_instruction
from .checkpoint import load_training_state
from .geometry import canonicalize_quaternion
from .policy import PolicyConfig
from .tensor import Tensor
from .text import Vocabulary, empty_tokens, encode as encode_text
from .encoder import EncoderConfig
from .training import TrainConfig, configs_from_meta, train_bc

log = logging.getLogger(__name__)

ActFn = Callable[[SceneState, str], Action]


@dataclass
class EvalConfig:
    episodes: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    split: str = "seen"  # or "unseen"
    instruction_style: str = "default"  # "default" | "long" | "none"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.instruction_style not in ("default", "long", "none"):
            raise ValueError(f"unknown instruction style {self.instruction_style!r}")


@dataclass
class ResultRow:
    task: str
    condition: str
    per_seed: list[float]  # success % per seed
    episodes: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def sorted_rows(self) -> list[ResultRow]:
        return sorted(self.rows, key=lambda r: (r.task, r.condition))


def split_variations(dataset: Dataset, split: str) -> list[tuple[int, VariationSpec]]:
    if split == "seen":
        return dataset.variations("train")
    out = [
        (vid, v)
        for label in ("unseen_ordering", "unseen_color")
        for vid, v in dataset.variations(label)
    ]
    return out


def run_episode(act_fn: ActFn, task: TaskSpec, var: VariationSpec, seed: int,
                style: str = "default") -> bool:
    state, _ = reset(task, var, seed)
    instruction = make_instruction(task, var, "long" if style == "long" else "default")
    done, success = False, False
    while not done:
        action = act_fn(state, instruction)
        state, done, success = step(state, action)
    return success


def evaluate_policy(
    act_fn: ActFn,
    task: TaskSpec,
    variations: list[tuple[int, VariationSpec]],
    episodes: int,
    seed: int,
    style: str = "default",
    reset_fn: Callable[[], None] | None = None,
) -> float:
    """Success rate (%) over episodes spread round-robin across variations."""
    if not variations:
        raise ValueError("evaluate_policy: no variations for the requested split")
    wins = 0
    for e in range(episodes):
        vid, var = variations[e % len(variations)]
        ep_seed = int(
            np.random.SeedSequence([seed, vid, e, 13]).generate_state(1)[0] & 0x7FFFFFFF
        )
        if reset_fn is not None:
            reset_fn()
        if run_episode(act_fn, task, var, ep_seed, style):
            wins += 1
    return 100.0 * wins / episodes


class ModelPolicy:
    """Closed-loop wrapper: encode observations, keep a C-step history, and
    emit canonicalized actions from the policy head."""

    def __init__(
        self,
        params: dict[str, Tensor],
        enc_cfg: EncoderConfig,
        pol_cfg: PolicyConfig,
        vocab: Vocabulary,
        selection: str = "concat_all",
        instruction_style: str = "default",
    ):
        self.params = params
        self.enc_cfg = enc_cfg
        self.pol_cfg = pol_cfg
        self.vocab = vocab
        self.selection = selection
        self.style = instruction_style
        self._tok_cache: dict[str, tuple[np.ndarray, int]] = {}
        self.reset()

    def reset(self) -> None:
        self.history: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def _tokens(self, instruction: str) -> tuple[np.ndarray, int]:
        if self.style == "none":
            seq = empty_tokens(self.enc_cfg.text_len)
            return seq.ids, 0
        if instruction not in self._tok_cache:
            seq = encode_text(instruction, self.vocab, self.enc_cfg.text_len)
            self._tok_cache[instruction] = (seq.ids, seq.true_length)
        return self._tok_cache[instruction]

    def act(self, state: SceneState, instruction: str) -> Action:
        obs = make_observation(state)
        ids, tlen = self._tokens(instruction)
        k = self.pol_cfg.cameras
        imgs = obs.images.astype(np.float32) / np.float32(255.0)
        pooled = enc.encode_batch(
            imgs,
            np.broadcast_to(ids[None], (k, ids.shape[0])),
            np.full(k, tlen, dtype=np.int64),
            self.params,
            self.enc_cfg,
        )
        stack = enc.FeatureStack(vectors=pooled, depth=self.enc_cfg.depth)
        h = enc.multiscale(stack, self.selection, self.params).data  # (K, d_p)

        c = self.pol_cfg.context
        feats = np.zeros((1, c, k, self.pol_cfg.dim), dtype=np.float32)
        proprio = np.zeros((1, c, 4), dtype=np.float32)
        past = np.zeros((1, c, 8), dtype=np.float32)
        valid = np.zeros((1, c), dtype=np.float32)
        hist = self.history[-(c - 1):] if c > 1 else []
        entries = hist + [(h, obs.proprio, np.zeros(8, dtype=np.float32))]
        for i, (hv, pv, av) in enumerate(entries):
            ci = c - len(entries) + i
            feats[0, ci] = hv
            proprio[0, ci] = pv
            past[0, ci] = av
            valid[0, ci] = 1.0
        window = pol.embed_inputs(feats, proprio, past, valid, self.params, self.pol_cfg)
        predicted = pol.policy_forward(window, self.params, self.pol_cfg)
        action = predicted.executed(0)
        self.history.append((h, obs.proprio, action.as_array()))
        return action

    def __call__(self, state: SceneState, instruction: str) -> Action:
        return self.act(state, instruction)


def expert_as_policy(state: SceneState, instruction: str) -> Action:
    return expert_action(state)


def random_policy(seed: int) -> ActFn:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    def act(state: SceneState, instruction: str) -> Action:
        return Action(
            pos=rng.uniform(0.0, 1.0, 3).astype(np.float32),
            quat=canonicalize_quaternion(rng.normal(size=4).astype(np.float32)),
            gripper=float(rng.random()),
        )

    return act


def load_policy(ckpt_path: str | Path, vocab: Vocabulary,
                instruction_style: str = "default") -> ModelPolicy:
    arrays, _opt, meta = load_training_state(ckpt_path)
    enc_cfg, pol_cfg, selection, trained_instructions = configs_from_meta(meta)
    if pol_cfg is None:
        raise ValueError(f"{ckpt_path}: checkpoint has no policy config header")
    params = {name: Tensor(arr) for name, arr in arrays.items()}
    style = "none" if trained_instructions == "off" else instruction_style
    return ModelPolicy(params, enc_cfg, pol_cfg, vocab, selection, style)


def rollout_eval(
    ckpt_path: str | Path,
    dataset: Dataset,
    cfg: EvalConfig,
    vocab: Vocabulary,
    condition: str = "default",
) -> ResultTable:
    """Closed-loop success of a checkpointed policy over a dataset's
    split-appropriate variations."""
    policy = load_policy(ckpt_path, vocab, cfg.instruction_style)
    variations = split_variations(dataset, cfg.split)
    if not variations:
        raise ValueError(f"rollout_eval: dataset has no {cfg.split!r} variations")
    task = dataset.task
    per_seed = []
    for seed in cfg.seeds:
        per_seed.append(
            evaluate_policy(
                policy, task, variations, cfg.episodes, seed,
                style=policy.style, reset_fn=policy.reset,
            )
        )
    table = ResultTable()
    table.rows.append(
        ResultRow(task=task.name, condition=condition, per_seed=per_seed,
                  episodes=cfg.episodes)
    )
    return table


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_AXES = {
    "fusion": ("joint", "concat", "film"),
    "context": (1, 2, 4, 8),
    "features": ("last", "second_to_last", "concat_last_half", "concat_first_half",
                 "concat_all"),
    "instructions": ("on", "off"),
    "encoder_init": ("pretrained", "scratch"),
    "encoder_preset": ("tiny", "small", "medium", "large"),
}


@dataclass
class AblationMatrix:
    """One-factor-at-a-time grid around a base configuration."""

    axes: dict[str, tuple] = field(default_factory=lambda: dict(ABLATION_AXES))

    def cells(self) -> list[tuple[str, object]]:
        out = []
        for axis, values in self.axes.items():
            if axis not in ABLATION_AXES:
                raise ValueError(f"unknown ablation axis {axis!r}")
            for v in values:
                out.append((axis, v))
        return out


def _cell_configs(
    axis: str,
    value,
    base_train: TrainConfig,
    base_enc: EncoderConfig,
    base_pol: PolicyConfig,
    pretrain_ckpt: str | None,
) -> tuple[TrainConfig, EncoderConfig, PolicyConfig]:
    train_cfg, enc_cfg, pol_cfg = base_train, base_enc, base_pol
    if axis == "fusion":
        enc_cfg = replace(enc_cfg, fusion=value)
    elif axis == "context":
        pol_cfg = replace(pol_cfg, context=int(value))
    elif axis == "features":
        train_cfg = replace(train_cfg, multiscale=value)
    elif axis == "instructions":
        train_cfg = replace(train_cfg, instructions=value)
    elif axis == "encoder_init":
        if value == "pretrained":
            if not pretrain_ckpt:
                raise ValueError("encoder_init axis needs a pretraining checkpoint")
            train_cfg = replace(train_cfg, encoder_init=str(pretrain_ckpt))
        else:
            train_cfg = replace(train_cfg, encoder_init="scratch")
    elif axis == "encoder_preset":
        # policy width stays fixed while the encoder scales
        enc_cfg = replace(
            EncoderConfig.from_preset(value),
            fusion=base_enc.fusion,
            text_len=base_enc.text_len,
            patch=base_enc.patch,
        )
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return train_cfg, enc_cfg, pol_cfg


def run_ablation(
    datasets: list[Dataset],
    matrix: AblationMatrix,
    base_train: TrainConfig,
    base_enc: EncoderConfig,
    base_pol: PolicyConfig,
    eval_cfg: EvalConfig,
    vocab: Vocabulary,
    out_dir: str | Path,
    pretrain_ckpt: str | Path | None = None,
) -> ResultTable:
    """Train and evaluate one model per cell; one row per (task, cell).
    A failed cell is recorded and the run continues."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = [ep for ds in datasets for ep in ds.episodes]
    table = ResultTable()
    trained: dict[tuple, Path] = {}

    if (
        "encoder_init" in matrix.axes
        and "pretrained" in matrix.axes["encoder_init"]
        and pretrain_ckpt is None
    ):
        raise ValueError("run_ablation: encoder_init axis requires pretrain_ckpt")

    for axis, value in matrix.cells():
        condition = f"{axis}={value}"
        try:
            train_cfg, enc_cfg, pol_cfg = _cell_configs(
                axis, value, base_train, base_enc, base_pol, pretrain_ckpt
            )
            expected_tokens = pol_cfg.context * (pol_cfg.cameras + 5)
            assert pol_cfg.tokens == expected_tokens, (
                f"token count {pol_cfg.tokens} != C*(K+5) = {expected_tokens}"
            )
            key = (
                enc_cfg, pol_cfg, train_cfg.multiscale, train_cfg.instructions,
                train_cfg.encoder_init,
            )
            if key not in trained:
                cell_dir = out_dir / f"{axis}_{value}"
                _, _, ckpt = train_bc(
                    episodes, train_cfg, enc_cfg, pol_cfg, vocab, cell_dir
                )
                trained[key] = ckpt
            ckpt = trained[key]
            style = "none" if train_cfg.instructions == "off" else eval_cfg.instruction_style
            cell_eval = replace(eval_cfg, instruction_style=style)
            for ds in datasets:
                t = rollout_eval(ckpt, ds, cell_eval, vocab, condition)
                table.rows.extend(t.rows)
        except Exception as exc:  # record the failure, keep going
            log.error("ablation cell %s failed: %s", condition, exc)
            for ds in datasets:
                table.rows.append(
                    ResultRow(
                        task=ds.task.name,
                        condition=f"{condition} [FAILED: {type(exc).__name__}]",
                        per_seed=[float("nan")] * len(eval_cfg.seeds),
                        episodes=0,
                    )
                )
    return table


# ---------------------------------------------------------------------------
# reports


def emit_report(table: ResultTable, fmt: str, path: str | Path) -> Path:
    """Write the table as csv or markdown; byte-deterministic given the table."""
    if not table.rows:
        raise ValueError("emit_report: empty table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = table.sorted_rows()
    if fmt == "csv":
        lines = ["task,condition,mean_success,seed_successes,episodes"]
        for r in rows:
            seeds = ";".join(f"{s:.2f}" for s in r.per_seed)
            lines.append(f"{r.task},{r.condition},{r.mean:.2f},{seeds},{r.episodes}")
    elif fmt == "markdown":
        lines = []
        for task in sorted({r.task for r in rows}):
            lines.append(f"## {task}")
            lines.append("")
            lines.append("| condition | mean success % | per-seed % | episodes |")
            lines.append("|---|---|---|---|")
            for r in rows:
                if r.task != task:
                    continue
                seeds = ", ".join(f"{s:.2f}" for s in r.per_seed)
                lines.append(f"| {r.condition} | {r.mean:.2f} | {seeds} | {r.episodes} |")
            lines.append("")
    else:
        raise ValueError(f"emit_report: unknown format {fmt!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def reach_target_chance_rate(episodes_attempts: int = 2, radius: float = 0.05) -> float:
    """Analytic success probability of uniform random positions on the reach
    task: the target sits on the table, so one attempt hits with probability
    half the r-ball volume (z >= 0) over the unit workspace."""
    q = 0.5 * (4.0 / 3.0) * np.pi * radius**3
    return float(1.0 - (1.0 - q) ** episodes_attempts)
