"""Scripted experts, instruction templates (default and long styles), scene
captions for pretraining, and variation builders with seen/unseen splits."""

from __future__ import annotations

import itertools

import numpy as np

from ..geometry import IDENTITY_QUAT
from .scene import (
    BLOCK_HEIGHT,
    BLOCK_REST_Z,
    COLOR_NAMES,
    KIND_BLOCK,
    KIND_BUTTON,
    KIND_TARGET,
    Action,
    SceneState,
    TaskKind,
    TaskSpec,
    VariationSpec,
    episode_done,
)

INSTRUCTION_STYLES = ("default", "long")


class ExpertError(RuntimeError):
    pass


def _open_action(pos) -> Action:
    return Action(pos=np.asarray(pos, dtype=np.float32), quat=IDENTITY_QUAT.copy(), gripper=1.0)


def _close_action(pos) -> Action:
    return Action(pos=np.asarray(pos, dtype=np.float32), quat=IDENTITY_QUAT.copy(), gripper=0.0)


def expert_action(state: SceneState, task: TaskSpec | None = None,
                  var: VariationSpec | None = None) -> Action:
    """Deterministic scripted policy for the state's task."""
    task = task or state.task
    var = var or state.variation
    if episode_done(state):
        raise ExpertError("expert_action called on a terminal episode")

    if task.kind == TaskKind.REACH_TARGET:
        target = state.find(KIND_TARGET, var.colors[0])[0]
        return _open_action(target.pos.copy())

    if task.kind == TaskKind.PUSH_BUTTONS:
        instructed = [var.colors[i] for i in var.order]
        nxt = instructed[len(state.pressed_seq)]
        button = state.find(KIND_BUTTON, nxt)[0]
        return _open_action([button.pos[0], button.pos[1], 0.0])

    if task.kind == TaskKind.PICK_AND_LIFT:
        block = state.find(KIND_BLOCK, var.colors[0])[0]
        if not block.held:
            return _close_action(block.pos.copy())
        g = state.gripper.pos
        return _close_action([g[0], g[1], 0.3])

    if task.kind == TaskKind.STACK_BLOCKS:
        plate = state.find(KIND_TARGET)[0]
        held = next((o for o in state.objects if o.held), None)
        if held is not None:
            z = BLOCK_REST_Z + BLOCK_HEIGHT * plate.stack_height
            return _open_action([plate.pos[0], plate.pos[1], z])
        block = next(
            o for o in state.find(KIND_BLOCK, var.colors[0])
            if not o.held and o.stack_height == 0
        )
        return _close_action(block.pos.copy())

    raise ValueError(f"unknown task kind {task.kind}")


# ---------------------------------------------------------------------------
# instructions


def make_instruction(task: TaskSpec, var: VariationSpec, style: str = "default") -> str:
    if style not in INSTRUCTION_STYLES:
        raise ValueError(f"unknown instruction style {style!r}")
    names = [COLOR_NAMES[c] for c in var.colors]

    if task.kind == TaskKind.REACH_TARGET:
        c = names[0]
        if style == "default":
            return f"reach the {c} target"
        return f"move the white gripper closer to the {c} target, then touch the {c} target"

    if task.kind == TaskKind.PUSH_BUTTONS:
        ordered = [names[i] for i in var.order]
        if style == "default":
            return ", then ".join(f"push the {c} button" for c in ordered)
        parts = [
            f"move the white gripper closer to {ordered[0]} button, "
            f"then push {ordered[0]} button down"
        ]
        for prev, cur in zip(ordered, ordered[1:]):
            parts.append(
                f"after pushing {prev} button, pull the white gripper up and move "
                f"the gripper closer to {cur} button, then push {cur} button down"
            )
        return ", ".join(parts)

    if task.kind == TaskKind.PICK_AND_LIFT:
        c = names[0]
        if style == "default":
            return f"pick up the {c} block and lift it up to the target"
        return (
            f"move the white gripper closer to the {c} block, then grasp the {c} block, "
            f"after grasping the {c} block, pull the white gripper up and lift "
            f"the {c} block up to the target"
        )

    if task.kind == TaskKind.STACK_BLOCKS:
        c, n = names[0], var.count
        if style == "default":
            return f"place {n} of the {c} cubes on top of each other"
        return (
            f"choose a {c} cube as the stack base, then pick another {c} cube and "
            f"place it onto the {c} cube stack, then move the white gripper to pick "
            f"another {c} cube and place it onto the {c} cube stack, repeat until "
            f"the stack has {n} {c} cubes"
        )

    raise ValueError(f"unknown task kind {task.kind}")


# ---------------------------------------------------------------------------
# captions


def _location_phrase(pos) -> str:
    x, y = float(pos[0]), float(pos[1])
    h = "left" if x < 1 / 3 else ("right" if x > 2 / 3 else "center")
    v = "near" if y < 1 / 3 else ("far" if y > 2 / 3 else "middle")
    if v == "middle":
        return "in the center" if h == "center" else f"on the {h}"
    if h == "center":
        return f"at the {v} side"
    return f"on the {h} {v} side"


def generate_caption(state: SceneState) -> str:
    """Deterministic scene description: kinds, colors, coarse positions."""
    if not state.objects:
        return "an empty table"
    parts = [
        f"a {COLOR_NAMES[o.color]} {o.kind} {_location_phrase(o.pos)}"
        for o in state.objects
    ]
    return " and ".join(parts)


def template_corpus() -> list[str]:
    """Strings covering every word the instruction/caption grammar can emit."""
    out: list[str] = []
    ncolors = len(COLOR_NAMES)
    for ci in range(ncolors):
        trio = (ci, (ci + 1) % ncolors, (ci + 2) % ncolors)
        for style in INSTRUCTION_STYLES:
            out.append(make_instruction(
                TaskSpec.of(TaskKind.REACH_TARGET), VariationSpec(colors=(ci,)), style))
            out.append(make_instruction(
                TaskSpec.of(TaskKind.PICK_AND_LIFT), VariationSpec(colors=(ci,)), style))
            out.append(make_instruction(
                TaskSpec.of(TaskKind.PUSH_BUTTONS),
                VariationSpec(colors=trio, order=(0, 1, 2)), style))
            out.append(make_instruction(
                TaskSpec.of(TaskKind.PUSH_BUTTONS),
                VariationSpec(colors=trio[:2], order=(0, 1)), style))
            for n in (2, 3):
                out.append(make_instruction(
                    TaskSpec.of(TaskKind.STACK_BLOCKS),
                    VariationSpec(colors=(ci, (ci + 1) % ncolors), count=n), style))
    # caption grammar cover
    for color in COLOR_NAMES:
        for kind in (KIND_BUTTON, KIND_BLOCK, KIND_TARGET):
            for loc in (
                "in the center", "on the left", "on the right",
                "at the near side", "at the far side",
                "on the left near side", "on the right far side",
                "on the left far side", "on the right near side",
            ):
                out.append(f"a {color} {kind} {loc}")
    out.append("an empty table")
    return out


# ---------------------------------------------------------------------------
# variation builders


def build_variations(
    task: TaskSpec,
    num_train: int,
    seed: int = 0,
    holdout_orderings: int = 0,
    holdout_colors: int = 0,
) -> tuple[list[VariationSpec], list[str]]:
    """Variation list plus split labels ('train', 'unseen_ordering',
    'unseen_color'). Held-out orderings reuse the seen color pool in orders
    never seen in training; held-out-color variations include a color that
    never appears in any training ordering."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(task.kind), 7]))
    ncolors = len(COLOR_NAMES)

    if task.kind in (TaskKind.REACH_TARGET, TaskKind.PICK_AND_LIFT):
        variations = []
        for i in range(num_train):
            c = i % ncolors
            distractors = tuple((c + k) % ncolors for k in (1, 2, 3))
            variations.append(VariationSpec(colors=(c,), distractors=distractors))
        return variations, ["train"] * len(variations)

    if task.kind == TaskKind.STACK_BLOCKS:
        variations = []
        for i in range(num_train):
            c = i % ncolors
            plate = (c + 4) % ncolors
            variations.append(VariationSpec(colors=(c, plate), count=2 + (i % 2)))
        return variations, ["train"] * len(variations)

    if task.kind == TaskKind.PUSH_BUTTONS:
        pool_size = max(3, min(4, ncolors - (1 if holdout_colors else 0)))
        pool = list(range(pool_size))
        perms = list(itertools.permutations(pool, 3))
        perm_order = rng.permutation(len(perms))
        needed = num_train + holdout_orderings
        if needed > len(perms):
            raise ValueError(
                f"requested {needed} orderings, only {len(perms)} exist over {pool_size} colors"
            )
        chosen = [perms[i] for i in perm_order[:needed]]
        variations = [
            VariationSpec(colors=tuple(p), order=(0, 1, 2)) for p in chosen[:num_train]
        ]
        splits = ["train"] * num_train
        for p in chosen[num_train:]:
            variations.append(VariationSpec(colors=tuple(p), order=(0, 1, 2)))
            splits.append("unseen_ordering")
        held_color = pool_size  # first palette id outside the training pool
        for i in range(holdout_colors):
            base = chosen[i % len(chosen)]
            colors = (held_color, base[0], base[1])
            variations.append(VariationSpec(colors=colors, order=(0, 1, 2)))
            splits.append("unseen_color")
        return variations, splits

    raise ValueError(f"unknown task kind {task.kind}")
