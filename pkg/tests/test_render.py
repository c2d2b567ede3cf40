import numpy as np
import pytest

from tablebot.blockworld import (
    TaskKind,
    TaskSpec,
    VariationSpec,
    make_observation,
    read_ppm,
    render,
    reset,
    step,
    write_ppm,
)
from tablebot.blockworld.camera import BACKGROUND, CAMERAS, IMAGE_SIZE, _project
from tablebot.blockworld.scene import KIND_BLOCK, Action
from tablebot.geometry import IDENTITY_QUAT

REACH = TaskSpec.of(TaskKind.REACH_TARGET)
PICK = TaskSpec.of(TaskKind.PICK_AND_LIFT)


def test_render_determinism_bitwise():
    state, _ = reset(REACH, VariationSpec(colors=(0,), distractors=(1, 2)), 9)
    for cam in CAMERAS:
        assert np.array_equal(render(state, cam), render(state, cam))


def test_empty_scene_uniform_background():
    state, _ = reset(REACH, VariationSpec(colors=(0,)), 1)
    state.objects = []
    img = render(state, "top", draw_gripper=False)
    assert np.all(img == BACKGROUND)


def test_scene_is_not_uniform_with_objects():
    state, _ = reset(REACH, VariationSpec(colors=(0,), distractors=(1, 2, 3)), 2)
    img = render(state, "top")
    assert len(np.unique(img.reshape(-1, 3), axis=0)) >= 5  # bg + 4 colors


def test_unknown_camera_rejected():
    state, _ = reset(REACH, VariationSpec(colors=(0,)), 3)
    with pytest.raises(ValueError, match="camera"):
        render(state, "front")


def _blob_pixels(img, rgb):
    return np.argwhere(np.all(img == np.array(rgb, dtype=np.uint8), axis=-1))


def test_block_shift_matches_projection_arithmetic():
    # independent oracle: predicted pixel columns from the projection formula
    from tablebot.blockworld.camera import BLOCK_HALF
    from tablebot.blockworld.scene import COLOR_RGB

    var = VariationSpec(colors=(0,))
    state, _ = reset(PICK, var, 4)
    block = state.objects[0]
    shifts = []
    for x in (0.3, 0.4):
        block.pos = np.array([x, 0.5, 0.025], dtype=np.float32)
        img = render(state, "top", draw_gripper=False)
        cols = _blob_pixels(img, COLOR_RGB[0])[:, 1]
        # oracle: pixel columns c where |c + 0.5 - 32x| <= 32*half
        u = x * IMAGE_SIZE
        expect = [c for c in range(IMAGE_SIZE) if abs(c + 0.5 - u) <= BLOCK_HALF * IMAGE_SIZE]
        assert sorted(set(cols.tolist())) == expect
        shifts.append(min(cols))
    assert shifts[1] - shifts[0] == round(0.1 * IMAGE_SIZE)


def test_held_block_tracks_gripper_in_every_camera():
    from tablebot.blockworld.scene import COLOR_RGB

    var = VariationSpec(colors=(2,))
    state, _ = reset(PICK, var, 5)
    block = state.objects[0]
    state, _, _ = step(state, Action(pos=block.pos.copy(), quat=IDENTITY_QUAT, gripper=0.0))
    dest = np.array([0.7, 0.3, 0.2], dtype=np.float32)
    state, _, _ = step(state, Action(pos=dest, quat=IDENTITY_QUAT, gripper=0.0))
    for cam in CAMERAS:
        img = render(state, cam)
        blob = _blob_pixels(img, COLOR_RGB[2])
        assert len(blob), f"held block invisible in {cam}"
        cy, cx = blob.mean(axis=0)
        u, v, _ = _project(cam, state, state.gripper.pos)
        assert abs(cx - u) <= 3.0 and abs(cy - v) <= 3.0, cam


def test_pressed_button_changes_appearance():
    from tablebot.blockworld import TaskSpec as TS

    push = TS.of(TaskKind.PUSH_BUTTONS)
    var = VariationSpec(colors=(0, 1), order=(0, 1))
    state, _ = reset(push, var, 6)
    before = render(state, "top", draw_gripper=False)
    red = state.find("button", 0)[0]
    state, _, _ = step(state, Action(pos=np.array([red.pos[0], red.pos[1], 0.0]),
                                     quat=IDENTITY_QUAT, gripper=1.0))
    state.gripper.pos = np.array([0.5, 0.5, 0.3], dtype=np.float32)  # move away for render
    after = render(state, "top", draw_gripper=False)
    assert not np.array_equal(before, after)


def test_gripper_chevron_drawn_white():
    state, _ = reset(REACH, VariationSpec(colors=(0,)), 7)
    img = render(state, "top")
    assert len(_blob_pixels(img, (255, 255, 255))) >= 4


def test_wrist_camera_centered_on_gripper():
    state, _ = reset(REACH, VariationSpec(colors=(0,)), 8)
    u, v, _ = _project("wrist", state, state.gripper.pos)
    assert u == pytest.approx(IMAGE_SIZE / 2) and v == pytest.approx(IMAGE_SIZE / 2)


def test_observation_layout():
    state, _ = reset(REACH, VariationSpec(colors=(0,)), 10)
    obs = make_observation(state)
    assert obs.images.shape == (3, 32, 32, 3)
    assert obs.images.dtype == np.uint8
    assert obs.proprio.shape == (4,)


def test_ppm_roundtrip_and_header(tmp_path):
    state, _ = reset(REACH, VariationSpec(colors=(0,), distractors=(1,)), 11)
    img = render(state, "left_oblique")
    p = tmp_path / "frame.ppm"
    write_ppm(img, p)
    blob = p.read_bytes()
    assert blob.startswith(b"P6\n32 32\n255\n")
    assert len(blob) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3
    back = read_ppm(p)
    assert np.array_equal(back, img)
