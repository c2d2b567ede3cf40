"""Binary episode files, dataset generation with scripted experts, and the
image-caption corpus for encoder pretraining."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CAMERAS, IMAGE_SIZE, make_observation
from .scene import (
    Action,
    Observation,
    SceneState,
    TaskKind,
    TaskSpec,
    VariationSpec,
    reset,
    step,
)
from .tasks import build_variations, expert_action, generate_caption, make_instruction

log = logging.getLogger(__name__)

EPISODE_MAGIC = b"BWEP"
EPISODE_VERSION = 1
CORPUS_MAGIC = b"BWPC"
CORPUS_VERSION = 1
_IMG_BYTES = len(CAMERAS) * IMAGE_SIZE * IMAGE_SIZE * 3


@dataclass
class EpisodeRecord:
    task: TaskKind
    variation_id: int
    instruction: str
    steps: list[tuple[Observation, Action]]

    def images(self) -> np.ndarray:
        return np.stack([o.images for o, _ in self.steps], axis=0)

    def proprio(self) -> np.ndarray:
        return np.stack([o.proprio for o, _ in self.steps], axis=0)

    def actions(self) -> np.ndarray:
        return np.stack([a.as_array() for _, a in self.steps], axis=0)


def write_episode(path: str | Path, rec: EpisodeRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    instr = rec.instruction.encode("utf-8")
    if len(rec.steps) > 255:
        raise ValueError(f"episode too long for u8 step count: {len(rec.steps)}")
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<B", EPISODE_VERSION))
        fh.write(struct.pack("<H", int(rec.task)))
        fh.write(struct.pack("<H", rec.variation_id))
        fh.write(struct.pack("<H", len(instr)))
        fh.write(instr)
        fh.write(struct.pack("<B", len(rec.steps)))
        for obs, act in rec.steps:
            img = np.ascontiguousarray(obs.images, dtype=np.uint8)
            if img.shape != (len(CAMERAS), IMAGE_SIZE, IMAGE_SIZE, 3):
                raise ValueError(f"bad image block shape {img.shape}")
            fh.write(img.tobytes())
            fh.write(np.asarray(obs.proprio, dtype="<f4").tobytes())
            fh.write(np.asarray(act.as_array(), dtype="<f4").tobytes())


def read_episode(path: str | Path) -> EpisodeRecord:
    blob = Path(path).read_bytes()
    if blob[:4] != EPISODE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != EPISODE_VERSION:
        raise ValueError(f"{path}: unsupported version {blob[4]}")
    off = 5
    task_id, var_id, ilen = struct.unpack_from("<HHH", blob, off)
    off += 6
    instruction = blob[off : off + ilen].decode("utf-8")
    off += ilen
    nsteps = blob[off]
    off += 1
    steps = []
    for _ in range(nsteps):
        img = np.frombuffer(blob, dtype=np.uint8, count=_IMG_BYTES, offset=off)
        off += _IMG_BYTES
        proprio = np.frombuffer(blob, dtype="<f4", count=4, offset=off).astype(np.float32)
        off += 16
        act = np.frombuffer(blob, dtype="<f4", count=8, offset=off).astype(np.float32)
        off += 32
        obs = Observation(
            images=img.reshape(len(CAMERAS), IMAGE_SIZE, IMAGE_SIZE, 3).copy(),
            proprio=proprio,
        )
        steps.append((obs, Action.from_array(act)))
    return EpisodeRecord(TaskKind(task_id), var_id, instruction, steps)


def rollout_expert(task: TaskSpec, var: VariationSpec, seed: int,
                   style: str = "default") -> tuple[EpisodeRecord | None, bool]:
    """Run the scripted expert; returns (record, success). Failed episodes
    return (None, False)."""
    state, _ = reset(task, var, seed)
    instruction = make_instruction(task, var, style)
    steps: list[tuple[Observation, Action]] = []
    done, success = False, False
    while not done:
        obs = make_observation(state)
        action = expert_action(state)
        steps.append((obs, action))
        state, done, success = step(state, action)
    if not success:
        return None, False
    return EpisodeRecord(task.kind, 0, instruction, steps), True


def _variation_json(var: VariationSpec, var_id: int, split: str) -> dict:
    return {
        "id": var_id,
        "colors": list(var.colors),
        "order": list(var.order),
        "distractors": list(var.distractors),
        "count": var.count,
        "split": split,
    }


def _variation_from_json(d: dict) -> VariationSpec:
    return VariationSpec(
        colors=tuple(d["colors"]),
        order=tuple(d["order"]),
        distractors=tuple(d["distractors"]),
        count=d["count"],
    )


def generate_dataset(
    task: TaskSpec,
    variations: list[VariationSpec],
    episodes_per_variation: int,
    seed: int,
    out_dir: str | Path,
    style: str = "default",
    splits: list[str] | None = None,
) -> dict:
    """Roll out the expert over every variation, write episode files plus a
    JSON manifest. Failed expert episodes are discarded and reported."""
    if episodes_per_variation < 1:
        raise ValueError("episodes_per_variation must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = splits or ["train"] * len(variations)
    if len(splits) != len(variations):
        raise ValueError("splits must align with variations")

    episodes = []
    counts: dict[str, int] = {}
    failures = 0
    for var_id, (var, split) in enumerate(zip(variations, splits)):
        if split != "train":
            continue  # unseen variations are listed in the manifest, not demonstrated
        for e in range(episodes_per_variation):
            ep_seed = int(
                np.random.SeedSequence([seed, var_id, e]).generate_state(1)[0] & 0x7FFFFFFF
            )
            rec, ok = rollout_expert(task, var, ep_seed, style)
            if not ok:
                failures += 1
                continue
            rec.variation_id = var_id
            fname = f"ep_{var_id:04d}_{e:04d}.bwep"
            write_episode(out_dir / fname, rec)
            episodes.append(
                {
                    "file": fname,
                    "variation_id": var_id,
                    "split": split,
                    "steps": len(rec.steps),
                    "seed": ep_seed,
                }
            )
            counts[str(var_id)] = counts.get(str(var_id), 0) + 1
    if failures:
        log.warning("generate_dataset: %d expert episodes failed and were discarded", failures)

    manifest = {
        "format": "tablebot-dataset-v1",
        "task": task.name,
        "max_steps": task.max_steps,
        "style": style,
        "seed": seed,
        "episodes": episodes,
        "variations": [
            _variation_json(v, i, s) for i, (v, s) in enumerate(zip(variations, splits))
        ],
        "counts": counts,
        "failures": failures,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


@dataclass
class LoadedEpisode:
    task: TaskKind
    variation_id: int
    instruction: str
    images: np.ndarray  # uint8 (n, K, 32, 32, 3)
    proprio: np.ndarray  # float32 (n, 4)
    actions: np.ndarray  # float32 (n, 8)
    max_steps: int


@dataclass
class Dataset:
    manifest: dict
    episodes: list[LoadedEpisode]
    root: Path

    @property
    def task(self) -> TaskSpec:
        return TaskSpec.of(self.manifest["task"])

    def variations(self, split: str | None = None) -> list[tuple[int, VariationSpec]]:
        out = []
        for v in self.manifest["variations"]:
            if split is None or v["split"] == split:
                out.append((v["id"], _variation_from_json(v)))
        return out


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    episodes = []
    for entry in manifest["episodes"]:
        rec = read_episode(root / entry["file"])
        episodes.append(
            LoadedEpisode(
                task=rec.task,
                variation_id=rec.variation_id,
                instruction=rec.instruction,
                images=rec.images(),
                proprio=rec.proprio(),
                actions=rec.actions(),
                max_steps=manifest["max_steps"],
            )
        )
    return Dataset(manifest=manifest, episodes=episodes, root=root)


# ---------------------------------------------------------------------------
# pretraining corpus


def generate_pretrain_corpus(n_pairs: int, seed: int, out_dir: str | Path) -> dict:
    """Random scenes rendered from the top camera with generated captions."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    from .camera import render  # local import keeps module load light

    records: list[tuple[np.ndarray, str]] = []
    kinds = list(TaskKind)
    while len(records) < n_pairs:
        kind = kinds[int(rng.integers(len(kinds)))]
        task = TaskSpec.of(kind)
        variations, _ = build_variations(task, num_train=8, seed=int(rng.integers(1 << 30)))
        var = variations[int(rng.integers(len(variations)))]
        state, _ = reset(task, var, int(rng.integers(1 << 30)))
        # advance a random number of expert steps for scene diversity
        for _ in range(int(rng.integers(0, 3))):
            from .scene import episode_done

            if episode_done(state):
                break
            state, _, _ = step(state, expert_action(state))
        records.append((render(state, "top"), generate_caption(state)))

    pairs_path = out_dir / "pairs.bin"
    with open(pairs_path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<B", CORPUS_VERSION))
        fh.write(struct.pack("<I", len(records)))
        for img, caption in records:
            fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
            cb = caption.encode("utf-8")
            fh.write(struct.pack("<H", len(cb)))
            fh.write(cb)
    manifest = {"format": "tablebot-corpus-v1", "pairs": len(records), "seed": seed,
                "file": "pairs.bin"}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def load_pretrain_corpus(path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        path = path / manifest["file"]
    blob = path.read_bytes()
    if blob[:4] != CORPUS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported version {blob[4]}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    img_bytes = IMAGE_SIZE * IMAGE_SIZE * 3
    images = np.empty((count, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    captions: list[str] = []
    for i in range(count):
        images[i] = np.frombuffer(blob, dtype=np.uint8, count=img_bytes, offset=off).reshape(
            IMAGE_SIZE, IMAGE_SIZE, 3
        )
        off += img_bytes
        (clen,) = struct.unpack_from("<H", blob, off)
        off += 2
        captions.append(blob[off : off + clen].decode("utf-8"))
        off += clen
    return images, captions


def dump_episode_ppms(rec: EpisodeRecord, out_dir: str | Path) -> list[Path]:
    """One P6 PPM per camera per step."""
    from .camera import write_ppm

    out_dir = Path(out_dir)
    written = []
    for t, (obs, _) in enumerate(rec.steps):
        for k, cam in enumerate(CAMERAS):
            p = out_dir / f"step{t:02d}_{cam}.ppm"
            write_ppm(obs.images[k], p)
            written.append(p)
    return written
