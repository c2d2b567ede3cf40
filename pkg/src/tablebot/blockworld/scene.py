"""Deterministic tabletop world with teleporting macro-step semantics.

The gripper jumps to the commanded pose each step; grasping, releasing,
stacking and button presses are resolved by proximity rules. All positions
live in [0,1]^3 world units.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import canonicalize_quaternion, yaw_from_quaternion

# world constants
GRASP_RADIUS = 0.05
PRESS_RADIUS = 0.05
PRESS_MAX_Z = 0.02
STACK_RADIUS = 0.05
LIFT_THRESHOLD = 0.25
MIN_SEPARATION = 0.15
PLACE_MARGIN = 0.1  # objects spawn inside [margin, 1-margin]^2
BLOCK_HEIGHT = 0.05
BLOCK_REST_Z = 0.025
GRIPPER_START = (0.5, 0.5, 0.3)
MAX_PLACEMENT_REJECTS = 1000

COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink")
COLOR_RGB = np.array(
    [
        (220, 40, 40),
        (40, 200, 60),
        (60, 90, 230),
        (235, 220, 50),
        (160, 60, 210),
        (245, 140, 30),
        (40, 210, 210),
        (245, 120, 180),
    ],
    dtype=np.uint8,
)

KIND_BUTTON = "button"
KIND_BLOCK = "block"
KIND_TARGET = "target"


class PlacementError(RuntimeError):
    """Scene could not be placed under the separation constraint."""


class TaskKind(enum.IntEnum):
    REACH_TARGET = 0
    PUSH_BUTTONS = 1
    PICK_AND_LIFT = 2
    STACK_BLOCKS = 3


TASK_NAMES = {
    TaskKind.REACH_TARGET: "reach_target",
    TaskKind.PUSH_BUTTONS: "push_buttons",
    TaskKind.PICK_AND_LIFT: "pick_and_lift",
    TaskKind.STACK_BLOCKS: "stack_blocks",
}
_TASK_MAX_STEPS = {
    TaskKind.REACH_TARGET: 2,
    TaskKind.PUSH_BUTTONS: 6,
    TaskKind.PICK_AND_LIFT: 4,
    TaskKind.STACK_BLOCKS: 10,
}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    max_steps: int

    def __post_init__(self):
        assert self.max_steps <= 10

    @property
    def name(self) -> str:
        return TASK_NAMES[self.kind]

    @classmethod
    def of(cls, kind: TaskKind | str) -> "TaskSpec":
        if isinstance(kind, str):
            kind = TaskKind[{v: k.name for k, v in TASK_NAMES.items()}[kind]]
        return cls(kind, _TASK_MAX_STEPS[kind])


@dataclass(frozen=True)
class VariationSpec:
    """Sampled task configuration. `colors` are the instructed palette ids
    (task-specific meaning), `order` indexes `colors` for ordered tasks,
    `distractors` are extra object colors, `count` is the stack height."""

    colors: tuple[int, ...]
    order: tuple[int, ...] = ()
    distractors: tuple[int, ...] = ()
    count: int = 0

    def key(self) -> tuple[int, ...]:
        return (*self.colors, 99, *self.order, 99, *self.distractors, 99, self.count)


def validate_variation(task: TaskSpec, var: VariationSpec) -> None:
    if len(set(var.colors)) != len(var.colors):
        raise ValueError(f"variation: instructed colors must be distinct, got {var.colors}")
    for c in var.colors + var.distractors:
        if not 0 <= c < len(COLOR_NAMES):
            raise ValueError(f"variation: color id {c} outside palette")
    if task.kind == TaskKind.PUSH_BUTTONS:
        if sorted(var.order) != list(range(len(var.colors))):
            raise ValueError(f"variation: order {var.order} is not a permutation of colors")
    if task.kind == TaskKind.STACK_BLOCKS:
        if len(var.colors) != 2:
            raise ValueError("stack variation needs (block color, plate color)")
        if not 2 <= var.count <= 3:
            raise ValueError(f"stack count must be 2 or 3, got {var.count}")


@dataclass
class ObjectState:
    kind: str
    color: int
    pos: np.ndarray  # float32 (3,)
    held: bool = False
    pressed: bool = False
    stack_height: int = 0  # plate: current stack size; block: its level (1-based)

    def copy(self) -> "ObjectState":
        return replace(self, pos=self.pos.copy())


@dataclass
class GripperState:
    pos: np.ndarray
    yaw: float = 0.0
    open: bool = True

    def copy(self) -> "GripperState":
        return replace(self, pos=self.pos.copy())


@dataclass
class Action:
    pos: np.ndarray  # float32 (3,)
    quat: np.ndarray  # float32 (4,) (w, x, y, z)
    gripper: float  # open fraction; executed as open iff >= 0.5

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [
                np.asarray(self.pos, dtype=np.float32),
                canonicalize_quaternion(self.quat),
                np.array([self.gripper], dtype=np.float32),
            ]
        )

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Action":
        a = np.asarray(a, dtype=np.float32).reshape(8)
        return cls(pos=a[:3].copy(), quat=canonicalize_quaternion(a[3:7]), gripper=float(a[7]))


@dataclass
class Observation:
    images: np.ndarray  # uint8 (3, 32, 32, 3) in camera order top, left_oblique, wrist
    proprio: np.ndarray  # float32 (4,): [open, left finger, right finger, t/T]


@dataclass
class SceneState:
    objects: list[ObjectState]
    gripper: GripperState
    t: int
    rng: np.random.Generator
    task: TaskSpec
    variation: VariationSpec
    pressed_seq: tuple[int, ...] = ()

    def copy(self) -> "SceneState":
        return SceneState(
            objects=[o.copy() for o in self.objects],
            gripper=self.gripper.copy(),
            t=self.t,
            rng=copy.deepcopy(self.rng),
            task=self.task,
            variation=self.variation,
            pressed_seq=self.pressed_seq,
        )

    def snapshot(self) -> tuple:
        """Value snapshot for equality/determinism checks."""
        objs = tuple(
            (o.kind, o.color, tuple(float(x) for x in o.pos), o.held, o.pressed, o.stack_height)
            for o in self.objects
        )
        grip = (tuple(float(x) for x in self.gripper.pos), float(self.gripper.yaw),
                self.gripper.open)
        return (objs, grip, self.t, self.pressed_seq)

    def find(self, kind: str, color: int | None = None) -> list[ObjectState]:
        return [
            o for o in self.objects if o.kind == kind and (color is None or o.color == color)
        ]


def _sample_positions(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    placed: list[np.ndarray] = []
    rejects = 0
    while len(placed) < n:
        xy = rng.uniform(PLACE_MARGIN, 1.0 - PLACE_MARGIN, size=2)
        if all(np.linalg.norm(xy - p[:2]) >= MIN_SEPARATION for p in placed):
            placed.append(np.array([xy[0], xy[1], 0.0], dtype=np.float32))
        else:
            rejects += 1
            if rejects > MAX_PLACEMENT_REJECTS:
                raise PlacementError(
                    f"could not place {n} objects after {MAX_PLACEMENT_REJECTS} rejections"
                )
    return placed


def _build_objects(task: TaskSpec, var: VariationSpec, positions: list[np.ndarray]) -> list[ObjectState]:
    objs: list[ObjectState] = []
    idx = 0

    def take() -> np.ndarray:
        nonlocal idx
        p = positions[idx]
        idx += 1
        return p

    if task.kind == TaskKind.REACH_TARGET:
        for c in var.colors + var.distractors:
            objs.append(ObjectState(KIND_TARGET, c, take()))
    elif task.kind == TaskKind.PUSH_BUTTONS:
        for c in var.colors + var.distractors:
            objs.append(ObjectState(KIND_BUTTON, c, take()))
    elif task.kind == TaskKind.PICK_AND_LIFT:
        for c in var.colors + var.distractors:
            p = take()
            p[2] = BLOCK_REST_Z
            objs.append(ObjectState(KIND_BLOCK, c, p))
    elif task.kind == TaskKind.STACK_BLOCKS:
        objs.append(ObjectState(KIND_TARGET, var.colors[1], take()))
        for _ in range(var.count):
            p = take()
            p[2] = BLOCK_REST_Z
            objs.append(ObjectState(KIND_BLOCK, var.colors[0], p))
        for c in var.distractors:
            p = take()
            p[2] = BLOCK_REST_Z
            objs.append(ObjectState(KIND_BLOCK, c, p))
    return objs


def _object_count(task: TaskSpec, var: VariationSpec) -> int:
    if task.kind == TaskKind.STACK_BLOCKS:
        return 1 + var.count + len(var.distractors)
    return len(var.colors) + len(var.distractors)


def reset(task: TaskSpec, var: VariationSpec, seed: int) -> tuple[SceneState, str]:
    """Deterministically sample a scene for (task, variation, seed)."""
    from .tasks import make_instruction  # local import to avoid a cycle

    validate_variation(task, var)
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, int(task.kind), *var.key()])
    rng = np.random.default_rng(ss)
    positions = _sample_positions(rng, _object_count(task, var))
    state = SceneState(
        objects=_build_objects(task, var, positions),
        gripper=GripperState(pos=np.array(GRIPPER_START, dtype=np.float32), yaw=0.0, open=True),
        t=0,
        rng=rng,
        task=task,
        variation=var,
    )
    return state, make_instruction(task, var, "default")


def check_success(state: SceneState) -> bool:
    task, var = state.task, state.variation
    if task.kind == TaskKind.REACH_TARGET:
        target = state.find(KIND_TARGET, var.colors[0])[0]
        return float(np.linalg.norm(state.gripper.pos - target.pos)) <= GRASP_RADIUS
    if task.kind == TaskKind.PUSH_BUTTONS:
        instructed = tuple(var.colors[i] for i in var.order)
        return state.pressed_seq == instructed
    if task.kind == TaskKind.PICK_AND_LIFT:
        block = state.find(KIND_BLOCK, var.colors[0])[0]
        return block.held and float(block.pos[2]) >= LIFT_THRESHOLD
    if task.kind == TaskKind.STACK_BLOCKS:
        stacked = [
            o for o in state.find(KIND_BLOCK, var.colors[0]) if o.stack_height > 0
        ]
        return len(stacked) >= var.count
    raise ValueError(f"unknown task kind {task.kind}")


def episode_done(state: SceneState) -> bool:
    return check_success(state) or state.t >= state.task.max_steps


def step(state: SceneState, action: Action) -> tuple[SceneState, bool, bool]:
    """Execute one macro-step; returns (next state, done, success)."""
    arr = action.as_array()
    if not np.isfinite(arr).all():
        raise ValueError(f"step: non-finite action {arr}")
    s = state.copy()
    was_open = s.gripper.open

    s.gripper.pos = np.clip(np.asarray(action.pos, dtype=np.float32), 0.0, 1.0)
    s.gripper.yaw = yaw_from_quaternion(action.quat)
    new_open = action.gripper >= 0.5

    held = next((o for o in s.objects if o.held), None)
    if held is not None:
        held.pos = s.gripper.pos.copy()

    if was_open and not new_open:
        # closing: grasp the nearest free block in reach
        candidates = [
            (float(np.linalg.norm(o.pos - s.gripper.pos)), i)
            for i, o in enumerate(s.objects)
            if o.kind == KIND_BLOCK and not o.held and o.stack_height == 0
        ]
        candidates = [(d, i) for d, i in candidates if d <= GRASP_RADIUS]
        if candidates:
            _, i = min(candidates)
            s.objects[i].held = True
            s.objects[i].pos = s.gripper.pos.copy()
    elif not was_open and new_open and held is not None:
        # opening: release; snap onto a stack plate if horizontally close
        held.held = False
        anchor = None
        for o in s.objects:
            if o.kind == KIND_TARGET and (
                float(np.linalg.norm(o.pos[:2] - s.gripper.pos[:2])) <= STACK_RADIUS
            ):
                anchor = o
                break
        if anchor is not None:
            level = anchor.stack_height + 1
            anchor.stack_height = level
            held.stack_height = level
            held.pos = np.array(
                [anchor.pos[0], anchor.pos[1], BLOCK_REST_Z + BLOCK_HEIGHT * (level - 1)],
                dtype=np.float32,
            )
        else:
            held.pos = np.array(
                [s.gripper.pos[0], s.gripper.pos[1], BLOCK_REST_Z], dtype=np.float32
            )
    s.gripper.open = new_open

    if s.gripper.pos[2] <= PRESS_MAX_Z:
        for o in s.objects:
            if (
                o.kind == KIND_BUTTON
                and not o.pressed
                and float(np.linalg.norm(o.pos - s.gripper.pos)) <= PRESS_RADIUS
            ):
                o.pressed = True
                s.pressed_seq = s.pressed_seq + (o.color,)

    s.t += 1
    success = check_success(s)
    done = success or s.t >= s.task.max_steps
    return s, done, success


def proprioception(state: SceneState) -> np.ndarray:
    """[gripper open, left finger, right finger, t/T]; fingers mirror the open
    flag because the teleporting gripper has no articulated joints."""
    open_val = 1.0 if state.gripper.open else 0.0
    return np.array(
        [open_val, open_val, open_val, state.t / state.task.max_steps], dtype=np.float32
    )
