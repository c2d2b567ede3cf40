"""Painter's-algorithm rasterization of scenes into 32x32 RGB images.

Three fixed cameras: `top` (orthographic overhead), `left_oblique` (affine
side view mixing x and z into the vertical axis), and `wrist` (overhead crop
centered on the gripper). Flat shading, fixed palette, deterministic.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import (
    COLOR_RGB,
    KIND_BLOCK,
    KIND_BUTTON,
    KIND_TARGET,
    Observation,
    SceneState,
    proprioception,
)

IMAGE_SIZE = 32
CAMERAS = ("top", "left_oblique", "wrist")
BACKGROUND = np.array((40, 40, 46), dtype=np.uint8)
GRIPPER_COLOR = np.array((255, 255, 255), dtype=np.uint8)

WRIST_HALF = 0.25  # world half-extent of the wrist crop

# world-unit half extents of the drawn footprints; large enough that a blob
# spans patch boundaries, which is what lets pooled patch features localize it
BUTTON_RADIUS = 0.07
BLOCK_HALF = 0.06
TARGET_RADIUS = 0.12
PRESSED_SHRINK = 0.66
PRESSED_DIM = 0.45
CHEVRON_LEN = 0.08
CHEVRON_OPEN_ANGLE = 0.75
CHEVRON_CLOSED_ANGLE = 0.28


def _project(camera: str, state: SceneState, p: np.ndarray) -> tuple[float, float, float]:
    """World point -> (u, v, scale). u is the pixel column axis, v the row axis."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    if camera == "top":
        return x * IMAGE_SIZE, y * IMAGE_SIZE, IMAGE_SIZE
    if camera == "left_oblique":
        return y * IMAGE_SIZE, (0.9 - 0.25 * x - 0.5 * z) * IMAGE_SIZE, IMAGE_SIZE
    if camera == "wrist":
        g = state.gripper.pos
        scale = IMAGE_SIZE / (2 * WRIST_HALF)
        return (x - g[0] + WRIST_HALF) * scale, (y - g[1] + WRIST_HALF) * scale, scale
    raise ValueError(f"unknown camera {camera!r}")


def _paint_order(camera: str, state: SceneState) -> list:
    def key(obj):
        if camera == "left_oblique":
            return (-obj.pos[0], obj.pos[2])
        return (obj.pos[2], obj.pos[0])

    return sorted(state.objects, key=key)


def _fill_mask(img: np.ndarray, u: float, v: float, r: float, inside, color: np.ndarray) -> None:
    lo_c = max(int(np.floor(u - r - 1)), 0)
    hi_c = min(int(np.ceil(u + r + 1)) + 1, IMAGE_SIZE)
    lo_r = max(int(np.floor(v - r - 1)), 0)
    hi_r = min(int(np.ceil(v + r + 1)) + 1, IMAGE_SIZE)
    if lo_c >= hi_c or lo_r >= hi_r:
        return
    cols = np.arange(lo_c, hi_c, dtype=np.float32) + 0.5 - u
    rows = np.arange(lo_r, hi_r, dtype=np.float32) + 0.5 - v
    dc, dr = np.meshgrid(cols, rows)
    mask = inside(dc, dr, r)
    img[lo_r:hi_r, lo_c:hi_c][mask] = color


def _inside_circle(dc, dr, r):
    return dc * dc + dr * dr <= r * r


def _inside_square(dc, dr, r):
    return np.maximum(np.abs(dc), np.abs(dr)) <= r


def _inside_diamond(dc, dr, r):
    return np.abs(dc) + np.abs(dr) <= r


def _draw_object(img: np.ndarray, camera: str, state: SceneState, obj) -> None:
    u, v, scale = _project(camera, state, obj.pos)
    world_scale = scale
    color = COLOR_RGB[obj.color].copy()
    if obj.kind == KIND_BUTTON:
        r = BUTTON_RADIUS * world_scale
        if obj.pressed:
            r *= PRESSED_SHRINK
            color = (color.astype(np.float32) * PRESSED_DIM).astype(np.uint8)
        _fill_mask(img, u, v, r, _inside_circle, color)
    elif obj.kind == KIND_BLOCK:
        _fill_mask(img, u, v, BLOCK_HALF * world_scale, _inside_square, color)
    elif obj.kind == KIND_TARGET:
        _fill_mask(img, u, v, TARGET_RADIUS * world_scale, _inside_diamond, color)


def _draw_gripper(img: np.ndarray, camera: str, state: SceneState) -> None:
    g = state.gripper
    angle = CHEVRON_OPEN_ANGLE if g.open else CHEVRON_CLOSED_ANGLE
    # two arms sweeping back from the tip, rotated by yaw in the table plane
    for side in (-1.0, 1.0):
        a = g.yaw + side * angle
        direction = np.array([np.sin(a), -np.cos(a), 0.0], dtype=np.float32)
        for k in range(5):
            p = g.pos + direction * (CHEVRON_LEN * k / 4.0)
            u, v, _ = _project(camera, state, p)
            c, r = int(np.floor(u)), int(np.floor(v))
            if 0 <= r < IMAGE_SIZE and 0 <= c < IMAGE_SIZE:
                img[r, c] = GRIPPER_COLOR


def render(state: SceneState, camera: str, draw_gripper: bool = True) -> np.ndarray:
    """Rasterize one camera view; returns uint8 (32, 32, 3)."""
    if camera not in CAMERAS:
        raise ValueError(f"unknown camera {camera!r}, expected one of {CAMERAS}")
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in _paint_order(camera, state):
        _draw_object(img, camera, state, obj)
    if draw_gripper:
        _draw_gripper(img, camera, state)
    return img


def make_observation(state: SceneState) -> Observation:
    images = np.stack([render(state, cam) for cam in CAMERAS], axis=0)
    return Observation(images=images, proprio=proprioception(state))


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    fields: list[bytes] = []
    off = 2
    while len(fields) < 3:
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if blob[off : off + 1] == b"#":
            while blob[off : off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        fields.append(blob[start:off])
    off += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).copy()
