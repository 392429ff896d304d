"""Deterministic synthetic task-oriented segmentation corpus.

Scenes are 2-4 non-overlapping colored shapes (square, disk, cross in red,
green, blue) on a black background. Tasks are attribute predicates over
(shape, color); the ground-truth mask is the union of matching objects'
pixels, so the same scene emitted under two different tasks yields two
different masks. The guidance provider maps a task id to a (trainable)
embedding row, standing in for an upstream reasoning model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .objectives import PatchLabels, derive_gt_patch_labels
from .rng import Stream
from .serialize import load_tensors, save_tensors
from .tensor import NumericsError, Tensor

SHAPES = ("square", "disk", "cross")
COLORS = ("red", "green", "blue")
_RGB = {"red": (1.0, 0.15, 0.1), "green": (0.1, 1.0, 0.2), "blue": (0.15, 0.2, 1.0)}

# task id -> (description, predicate over (shape, color))
TASKS = (
    ("all squares", lambda s, c: s == "square"),
    ("all disks", lambda s, c: s == "disk"),
    ("all crosses", lambda s, c: s == "cross"),
    ("all red objects", lambda s, c: c == "red"),
    ("all green objects", lambda s, c: c == "green"),
    ("all blue objects", lambda s, c: c == "blue"),
    ("every object", lambda s, c: True),
    ("red disks or blue squares", lambda s, c: (s, c) in (("disk", "red"),
                                                          ("square", "blue"))),
)


@dataclass
class SceneConfig:
    size: int = 32
    patch_size: int = 4
    min_objects: int = 2
    max_objects: int = 4
    min_extent: int = 6
    max_extent: int = 10
    n_tasks: int = 8
    tasks_per_scene: int = 2
    max_retries: int = 64

    def __post_init__(self):
        if not 1 <= self.n_tasks <= len(TASKS):
            raise NumericsError(f"n_tasks must be in [1, {len(TASKS)}]")
        if self.tasks_per_scene > self.n_tasks:
            raise NumericsError("tasks_per_scene exceeds n_tasks")


@dataclass
class SceneObject:
    shape: str
    color: str
    row: int
    col: int
    extent: int


@dataclass
class TosSample:
    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    task_id: int
    gt_mask: np.ndarray        # (H, W) uint8
    patch_labels: PatchLabels
    scene_id: int = -1


def rasterize(obj: SceneObject, size: int) -> np.ndarray:
    """Binary footprint of one object on the full canvas."""
    mask = np.zeros((size, size), dtype=np.uint8)
    e = obj.extent
    r0, c0 = obj.row, obj.col
    if obj.shape == "square":
        mask[r0:r0 + e, c0:c0 + e] = 1
    elif obj.shape == "disk":
        rad = e / 2.0
        cy, cx = r0 + rad - 0.5, c0 + rad - 0.5
        yy, xx = np.mgrid[0:size, 0:size]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = 1
    elif obj.shape == "cross":
        arm = max(e // 3, 2)
        off = (e - arm) // 2
        mask[r0 + off:r0 + off + arm, c0:c0 + e] = 1
        mask[r0:r0 + e, c0 + off:c0 + off + arm] = 1
    else:
        raise NumericsError(f"unknown shape {obj.shape!r}")
    return mask


def _place_scene(stream: Stream, cfg: SceneConfig):
    """Objects with non-overlapping footprints, or None if placement fails."""
    n_objects = cfg.min_objects + stream.randint(cfg.max_objects - cfg.min_objects + 1)
    objects, occupied = [], np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    for _ in range(n_objects):
        placed = False
        for _ in range(cfg.max_retries):
            extent = cfg.min_extent + stream.randint(cfg.max_extent - cfg.min_extent + 1)
            obj = SceneObject(shape=stream.choice(SHAPES), color=stream.choice(COLORS),
                              row=stream.randint(cfg.size - extent + 1),
                              col=stream.randint(cfg.size - extent + 1),
                              extent=extent)
            footprint = rasterize(obj, cfg.size)
            if not np.logical_and(footprint, occupied).any():
                objects.append(obj)
                occupied |= footprint
                placed = True
                break
        if not placed:
            return None
    return objects


def render_scene(objects, cfg: SceneConfig) -> np.ndarray:
    img = np.zeros((3, cfg.size, cfg.size), dtype=np.float32)
    for obj in objects:
        footprint = rasterize(obj, cfg.size).astype(bool)
        for ch, val in enumerate(_RGB[obj.color]):
            img[ch][footprint] = val
    return img


def mask_for_task(objects, task_id: int, cfg: SceneConfig) -> np.ndarray:
    _, predicate = TASKS[task_id]
    mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    for obj in objects:
        if predicate(obj.shape, obj.color):
            mask |= rasterize(obj, cfg.size)
    return mask


def generate(seed: int, n_samples: int, cfg: SceneConfig | None = None) -> list:
    """Deterministic corpus of TosSamples.

    Each scene is emitted under ``tasks_per_scene`` distinct task ids, so the
    mask for a fixed image provably depends on the task. The whole corpus is
    regenerated from a derived seed if the positive-pixel fraction falls
    outside [0.05, 0.6].
    """
    cfg = cfg or SceneConfig()
    last_err = None
    for attempt in range(8):
        attempt_seed = seed if attempt == 0 else Stream.from_seed(
            seed, f"balance-retry/{attempt}").next_u64()
        try:
            return _generate_once(attempt_seed, n_samples, cfg)
        except NumericsError as err:
            last_err = err
    raise last_err


def _generate_once(seed: int, n_samples: int, cfg: SceneConfig) -> list:
    n_scenes = -(-n_samples // cfg.tasks_per_scene)
    samples: list[TosSample] = []
    scene_seq = 0
    for scene_id in range(n_scenes):
        objects = None
        while objects is None:
            stream = Stream.from_seed(seed, f"scene/{scene_seq}")
            scene_seq += 1
            objects = _place_scene(stream, cfg)
        image = render_scene(objects, cfg)
        task_ids = list(range(cfg.n_tasks))
        stream_tasks = Stream.from_seed(seed, f"tasks/{scene_id}")
        stream_tasks.shuffle(task_ids)
        for task_id in task_ids[:cfg.tasks_per_scene]:
            if len(samples) == n_samples:
                break
            gt = mask_for_task(objects, task_id, cfg)
            samples.append(TosSample(
                image=image, task_id=task_id, gt_mask=gt,
                patch_labels=derive_gt_patch_labels(gt, cfg.patch_size,
                                                    sample_id=len(samples)),
                scene_id=scene_id))
    _check_corpus(samples, cfg)
    return samples


def _check_corpus(samples, cfg: SceneConfig) -> None:
    frac = float(np.mean([s.gt_mask.mean() for s in samples]))
    if not 0.05 <= frac <= 0.6:
        raise NumericsError(
            f"corpus positive-pixel fraction {frac:.3f} outside [0.05, 0.6]")
    task_dependent = any(
        not np.array_equal(a.gt_mask, b.gt_mask)
        for a, b in zip(samples, samples[1:])
        if a.scene_id == b.scene_id and a.task_id != b.task_id)
    if len(samples) > 1 and not task_dependent:
        raise NumericsError("no emitted scene has task-dependent masks")


class GuidanceProvider:
    """task id -> guidance embedding row. Rows are trainable by default since
    there is no upstream model to supply meaningful vectors."""

    def __init__(self, n_tasks: int, guide_dim: int, seed: int,
                 trainable: bool = True):
        rows = np.stack([
            Stream.from_seed(seed, f"guide/{t}").uniforms((guide_dim,), -0.5, 0.5)
            for t in range(n_tasks)])
        self.table = Tensor(rows, requires_grad=trainable)
        self.trainable = trainable
        self.n_tasks = n_tasks

    def guidance_for(self, task_id: int) -> Tensor:
        """The (1, d) embedding for a task; differentiable into the table."""
        if not 0 <= task_id < self.n_tasks:
            raise NumericsError(f"unknown task id {task_id}")
        return ops.gather_rows(self.table, [task_id])


def save_dataset(samples, cfg: SceneConfig, seed: int, out_dir) -> None:
    """meta.json plus a samples.vltp1 tensor container."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": seed,
        "n_samples": len(samples),
        "scene_cfg": {k: getattr(cfg, k) for k in (
            "size", "patch_size", "min_objects", "max_objects",
            "min_extent", "max_extent", "n_tasks", "tasks_per_scene")},
        "tasks": [TASKS[t][0] for t in range(cfg.n_tasks)],
        "task_ids": [s.task_id for s in samples],
        "scene_ids": [s.scene_id for s in samples],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    tensors = {}
    for i, s in enumerate(samples):
        tensors[f"img/{i}"] = s.image
        tensors[f"mask/{i}"] = s.gt_mask.astype(np.float32)
        tensors[f"labels/{i}"] = s.patch_labels.labels.astype(np.float32)
    save_tensors(out / "samples.vltp1", tensors)


def load_dataset(in_dir):
    """Returns (samples, cfg, seed)."""
    root = Path(in_dir)
    meta = json.loads((root / "meta.json").read_text())
    cfg = SceneConfig(**meta["scene_cfg"])
    tensors = load_tensors(root / "samples.vltp1")
    samples = []
    for i in range(meta["n_samples"]):
        mask = tensors[f"mask/{i}"].astype(np.uint8)
        labels = PatchLabels(labels=tensors[f"labels/{i}"].astype(np.uint8),
                             sample_id=i)
        samples.append(TosSample(image=tensors[f"img/{i}"],
                                 task_id=int(meta["task_ids"][i]),
                                 gt_mask=mask, patch_labels=labels,
                                 scene_id=int(meta["scene_ids"][i])))
    return samples, cfg, int(meta["seed"])
