"""Command-line entry point.

Verbs: gen-data, gen-pretrain-corpus, pretrain, train, eval, ablate, render.
Every verb accepts --seed, --out and --config (plain key=value file,
overridden by explicit command-line keys). The fully-resolved configuration is
echoed before the verb runs. Exit codes: 0 success, 1 domain error, 2 usage.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blockworld.data import (
    generate_dataset,
    generate_pretrain_corpus,
    load_dataset,
    read_episode,
)
from .blockworld.scene import TaskSpec
from .blockworld.tasks import build_variations, template_corpus
from .text import build_vocab
from .encoder import EncoderConfig
from .policy import PolicyConfig
from .training import TrainConfig, pretrain_encoder, train_bc

VERBS = ("gen-data", "gen-pretrain-corpus", "pretrain", "train", "eval", "ablate", "render")


class UsageError(Exception):
    pass


@dataclass
class Command:
    verb: str
    options: dict


# option name -> (type, default, required)
_COMMON = {
    "seed": (int, 0, False),
    "out": (str, None, True),
    "config": (str, None, False),
    "workers": (int, 1, False),
    "deterministic": (str, "on", False),
}
_SPECS: dict[str, dict] = {
    "gen-data": {
        "task": (str, None, True),
        "episodes": (int, None, True),
        "variations": (int, 8, False),
        "holdout_orderings": (int, 0, False),
        "holdout_colors": (int, 0, False),
        "style": (str, "default", False),
    },
    "gen-pretrain-corpus": {
        "pairs": (int, None, True),
    },
    "pretrain": {
        "corpus": (str, None, True),
        "preset": (str, "small", False),
        "fusion": (str, "joint", False),
        "iterations": (int, 2000, False),
        "batch_size": (int, 64, False),
        "lr": (float, 5e-4, False),
        "weight_decay": (float, 5e-5, False),
        "text_len": (int, 32, False),
    },
    "train": {
        "data": (str, None, True),
        "preset": (str, "small", False),
        "fusion": (str, "joint", False),
        "context": (int, 4, False),
        "features": (str, "concat_all", False),
        "iterations": (int, 10000, False),
        "batch_size": (int, 64, False),
        "lr": (float, 5e-4, False),
        "weight_decay": (float, 5e-5, False),
        "warmup": (int, 100, False),
        "jitter": (float, 0.05, False),
        "encoder_init": (str, "scratch", False),
        "freeze_encoder": (str, "off", False),
        "instructions": (str, "on", False),
        "text_len": (int, 32, False),
        "policy_dim": (int, 64, False),
        "policy_depth": (int, 2, False),
        "policy_heads": (int, 4, False),
    },
    "eval": {
        "ckpt": (str, None, True),
        "data": (str, None, True),
        "episodes": (int, 100, False),
        "seeds": (str, "0,1,2", False),
        "split": (str, "seen", False),
        "style": (str, "default", False),
    },
    "ablate": {
        "data": (str, None, True),
        "axes": (str, "all", False),
        "train_iterations": (int, 300, False),
        "batch_size": (int, 16, False),
        "episodes": (int, 20, False),
        "seeds": (str, "0", False),
        "preset": (str, "tiny", False),
        "fusion": (str, "joint", False),
        "context": (int, 4, False),
        "features": (str, "concat_all", False),
        "text_len": (int, 32, False),
        "pretrain_ckpt": (str, None, False),
        "pretrain_iterations": (int, 200, False),
        "corpus_pairs": (int, 512, False),
    },
    "render": {
        "data": (str, None, True),
        "episode": (int, 0, False),
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _load_config_file(path: str) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config file {path}: malformed line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse(argv: list[str] | None = None) -> Command:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = argparse.ArgumentParser(prog="tablebot", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        for name, (typ, _default, _req) in {**_COMMON, **_SPECS[verb]}.items():
            sp.add_argument(_flag(name), dest=name, type=typ, default=None)
    ns = parser.parse_args(argv)

    spec = {**_COMMON, **_SPECS[ns.verb]}
    options: dict = {}
    file_values = {}
    if ns.config:
        file_values = _load_config_file(ns.config)
        for key in file_values:
            if key not in spec:
                raise UsageError(f"config file: unknown key {key!r} for verb {ns.verb}")
    for name, (typ, default, required) in spec.items():
        cli_val = getattr(ns, name)
        if cli_val is not None:
            options[name] = cli_val
        elif name in file_values:
            options[name] = typ(file_values[name])
        else:
            options[name] = default
    for name, (_typ, _default, required) in spec.items():
        if required and options[name] is None:
            raise UsageError(f"{ns.verb}: missing required key {_flag(name)}")
    return Command(verb=ns.verb, options=options)


def _echo(cmd: Command) -> None:
    kv = " ".join(f"{k}={cmd.options[k]}" for k in sorted(cmd.options))
    print(f"[tablebot] {cmd.verb} {kv}")


def _vocab():
    return build_vocab(template_corpus())


def _parse_seeds(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(s).split(",") if x != "")


def _train_configs(o: dict) -> tuple[TrainConfig, EncoderConfig, PolicyConfig]:
    train_cfg = TrainConfig(
        lr=o["lr"],
        weight_decay=o["weight_decay"],
        warmup_steps=o["warmup"],
        batch_size=o["batch_size"],
        iterations=o["iterations"],
        jitter=o["jitter"],
        seed=o["seed"],
        deterministic=o["deterministic"] == "on",
        encoder_init=o["encoder_init"],
        freeze_encoder=o["freeze_encoder"] == "on",
        instructions=o["instructions"],
        multiscale=o["features"],
    )
    enc_cfg = EncoderConfig.from_preset(o["preset"], fusion=o["fusion"],
                                        text_len=o["text_len"])
    pol_cfg = PolicyConfig(
        dim=o["policy_dim"], depth=o["policy_depth"], heads=o["policy_heads"],
        context=o["context"],
    )
    return train_cfg, enc_cfg, pol_cfg


def dispatch(cmd: Command) -> int:
    _echo(cmd)
    o = cmd.options
    out = Path(o["out"])

    if cmd.verb == "gen-data":
        task = TaskSpec.of(o["task"])
        variations, splits = build_variations(
            task, o["variations"], o["seed"],
            holdout_orderings=o["holdout_orderings"], holdout_colors=o["holdout_colors"],
        )
        manifest = generate_dataset(
            task, variations, o["episodes"], o["seed"], out, style=o["style"],
            splits=splits,
        )
        _vocab().save(out / "vocab.txt")
        print(f"[tablebot] wrote {len(manifest['episodes'])} episodes to {out}")
        return 0

    if cmd.verb == "gen-pretrain-corpus":
        manifest = generate_pretrain_corpus(o["pairs"], o["seed"], out)
        print(f"[tablebot] wrote {manifest['pairs']} pairs to {out}")
        return 0

    if cmd.verb == "pretrain":
        cfg = TrainConfig(
            lr=o["lr"], weight_decay=o["weight_decay"], batch_size=o["batch_size"],
            iterations=o["iterations"], seed=o["seed"],
            deterministic=o["deterministic"] == "on",
        )
        enc_cfg = EncoderConfig.from_preset(o["preset"], fusion=o["fusion"],
                                            text_len=o["text_len"])
        vocab = _vocab()
        _, metrics, ckpt = pretrain_encoder(o["corpus"], cfg, enc_cfg, vocab, out)
        vocab.save(out / "vocab.txt")
        print(f"[tablebot] pretrained encoder -> {ckpt} "
              f"(final loss {metrics.rows[-1][1]:.4f})")
        return 0

    if cmd.verb == "train":
        train_cfg, enc_cfg, pol_cfg = _train_configs(o)
        episodes = []
        for part in str(o["data"]).split(","):
            episodes.extend(load_dataset(part).episodes)
        vocab = _vocab()
        _, metrics, ckpt = train_bc(episodes, train_cfg, enc_cfg, pol_cfg, vocab, out)
        vocab.save(out / "vocab.txt")
        print(f"[tablebot] trained policy -> {ckpt} "
              f"(final loss {metrics.rows[-1][1]:.5f})")
        return 0

    if cmd.verb == "eval":
        from .evalsuite import EvalConfig, emit_report, rollout_eval

        dataset = load_dataset(o["data"])
        cfg = EvalConfig(
            episodes=o["episodes"], seeds=_parse_seeds(o["seeds"]), split=o["split"],
            instruction_style=o["style"],
        )
        table = rollout_eval(o["ckpt"], dataset, cfg, _vocab(),
                             condition=f"split={o['split']},style={o['style']}")
        csv = emit_report(table, "csv", out / "results.csv")
        emit_report(table, "markdown", out / "results.md")
        for row in table.sorted_rows():
            print(f"[tablebot] {row.task} {row.condition}: {row.mean:.1f}% "
                  f"over {row.episodes} episodes x {len(row.per_seed)} seeds")
        print(f"[tablebot] report -> {csv}")
        return 0

    if cmd.verb == "ablate":
        from .evalsuite import (
            ABLATION_AXES,
            AblationMatrix,
            EvalConfig,
            emit_report,
            run_ablation,
        )

        datasets = [load_dataset(p) for p in str(o["data"]).split(",")]
        if o["axes"] == "all":
            matrix = AblationMatrix()
        else:
            matrix = AblationMatrix(
                axes={a: ABLATION_AXES[a] for a in str(o["axes"]).split(",")}
            )
        vocab = _vocab()
        pretrain_ckpt = o["pretrain_ckpt"]
        if pretrain_ckpt is None and "encoder_init" in matrix.axes:
            corpus_dir = out / "pretrain_corpus"
            generate_pretrain_corpus(o["corpus_pairs"], o["seed"], corpus_dir)
            pre_cfg = TrainConfig(
                iterations=o["pretrain_iterations"], batch_size=o["batch_size"],
                seed=o["seed"], deterministic=o["deterministic"] == "on",
            )
            enc_cfg0 = EncoderConfig.from_preset(o["preset"], fusion=o["fusion"],
                                                 text_len=o["text_len"])
            _, _, pretrain_ckpt = pretrain_encoder(
                corpus_dir, pre_cfg, enc_cfg0, vocab, out / "pretrain"
            )
        base_train = TrainConfig(
            iterations=o["train_iterations"], batch_size=o["batch_size"],
            seed=o["seed"], deterministic=o["deterministic"] == "on",
            multiscale=o["features"],
        )
        base_enc = EncoderConfig.from_preset(o["preset"], fusion=o["fusion"],
                                             text_len=o["text_len"])
        base_pol = PolicyConfig(context=o["context"])
        eval_cfg = EvalConfig(episodes=o["episodes"], seeds=_parse_seeds(o["seeds"]))
        table = run_ablation(
            datasets, matrix, base_train, base_enc, base_pol, eval_cfg, vocab, out,
            pretrain_ckpt=pretrain_ckpt,
        )
        csv = emit_report(table, "csv", out / "ablation.csv")
        emit_report(table, "markdown", out / "ablation.md")
        print(f"[tablebot] ablation table ({len(table.rows)} rows) -> {csv}")
        return 0

    if cmd.verb == "render":
        from .blockworld.data import dump_episode_ppms

        dataset_dir = Path(o["data"])
        manifest = load_dataset(dataset_dir).manifest
        entries = manifest["episodes"]
        if not 0 <= o["episode"] < len(entries):
            raise ValueError(
                f"render: episode {o['episode']} out of range [0, {len(entries)})"
            )
        root = dataset_dir if dataset_dir.is_dir() else dataset_dir.parent
        rec = read_episode(root / entries[o["episode"]]["file"])
        written = dump_episode_ppms(rec, out)
        print(f"[tablebot] wrote {len(written)} ppm frames to {out}")
        return 0

    raise UsageError(f"unknown verb {cmd.verb!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        cmd = parse(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return dispatch(cmd)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
