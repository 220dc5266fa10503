"""Synthetic scenes and their JSON-lines persistence."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou

SCENE_SCHEMA = "drmm-scene/1"

# Fill colors, one per class; cycled with a fixed offset when C > len.
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.90, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.90],
        [0.05, 0.05, 0.05],
        [1.00, 1.00, 1.00],
    ]
)
BACKGROUND = 0.5
NOISE_SIGMA = 0.02


class DataError(ValueError):
    pass


def class_color(c: int) -> np.ndarray:
    base = PALETTE[c % len(PALETTE)]
    if c < len(PALETTE):
        return base.copy()
    # deterministic shade for classes past the palette
    shift = 0.35 * ((c // len(PALETTE)) % 2)
    return np.abs(base - shift)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_onehot: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.class_onehot)
        if len(vals) < 1 or sorted(vals) != [0.0] * (len(vals) - 1) + [1.0]:
            raise DataError(f"class vector is not one-hot: {self.class_onehot}")
        object.__setattr__(self, "class_onehot", vals)

    @classmethod
    def of(cls, box, class_index: int, num_classes: int) -> "GroundTruth":
        if not isinstance(box, Box):
            box = Box.from_array(box)
        if not 0 <= class_index < num_classes:
            raise DataError(f"class {class_index} outside [0, {num_classes})")
        onehot = [0.0] * num_classes
        onehot[class_index] = 1.0
        return cls(box, tuple(onehot))

    @property
    def class_index(self) -> int:
        return self.class_onehot.index(1.0)

    @property
    def num_classes(self) -> int:
        return len(self.class_onehot)


@dataclass
class Scene:
    raster: np.ndarray
    gts: list = field(default_factory=list)
    id: int = 0
    num_classes: int = 0

    def __post_init__(self):
        if not self.num_classes and self.gts:
            self.num_classes = self.gts[0].num_classes


@dataclass(frozen=True)
class GenConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    max_objects: int = 3
    min_objects: int = 1
    min_size: float = 0.2
    max_size: float = 0.4
    allow_overlap: bool = False


def _check_config(cfg: GenConfig):
    if cfg.height < 8 or cfg.width < 8:
        raise DataError("raster must be at least 8x8")
    if cfg.num_classes < 2:
        raise DataError("need at least two classes")
    if cfg.max_objects < 0 or cfg.min_objects < 0:
        raise DataError("object counts must be non-negative")
    if not 0.0 < cfg.min_size <= cfg.max_size <= 1.0:
        raise DataError("need 0 < min_size <= max_size <= 1")
    # grid cells the smallest object snaps to
    side_h = max(1, int(np.ceil(cfg.min_size * cfg.height)))
    side_w = max(1, int(np.ceil(cfg.min_size * cfg.width)))
    if not cfg.allow_overlap:
        fit = (cfg.height // side_h) * (cfg.width // side_w)
        if cfg.max_objects > fit:
            raise DataError(
                f"cannot place {cfg.max_objects} disjoint objects of min_size "
                f"{cfg.min_size} in a {cfg.height}x{cfg.width} scene"
            )


def _sample_box(rng, cfg: GenConfig, max_size: float) -> Box:
    h, w = cfg.height, cfg.width
    lo_h = max(1, int(np.ceil(cfg.min_size * h)))
    lo_w = max(1, int(np.ceil(cfg.min_size * w)))
    hi_h = max(lo_h, int(np.floor(max_size * h)))
    hi_w = max(lo_w, int(np.floor(max_size * w)))
    bh = int(rng.integers(lo_h, hi_h + 1))
    bw = int(rng.integers(lo_w, hi_w + 1))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return Box(left / w, top / h, (left + bw) / w, (top + bh) / h)


def render(boxes_classes, cfg: GenConfig, rng) -> np.ndarray:
    raster = np.full((cfg.height, cfg.width, 3), BACKGROUND)
    for box, c in boxes_classes:
        t, b = int(round(box.t * cfg.height)), int(round(box.b * cfg.height))
        l, r = int(round(box.l * cfg.width)), int(round(box.r * cfg.width))
        raster[t:b, l:r] = class_color(c)
    raster = raster + rng.normal(0.0, NOISE_SIGMA, raster.shape)
    return np.clip(raster, 0.0, 1.0)


def generate(seed: int, n_scenes: int, cfg: GenConfig = GenConfig()) -> list:
    """Deterministic scenes of filled rectangles on a gray background."""
    _check_config(cfg)
    rng = np.random.default_rng(seed)
    scenes = []
    lo = min(cfg.min_objects, cfg.max_objects)
    for sid in range(n_scenes):
        n = int(rng.integers(lo, cfg.max_objects + 1))
        placed = None
        for _attempt in range(200):
            boxes = []
            # shrink the size cap for crowded scenes so rejection terminates
            cap = max(cfg.min_size, min(cfg.max_size, 0.9 / max(1.0, np.sqrt(n))))
            for _ in range(n):
                for _try in range(100):
                    cand = _sample_box(rng, cfg, cap)
                    if cfg.allow_overlap or all(iou(cand, o) == 0.0 for o in boxes):
                        boxes.append(cand)
                        break
                else:
                    break
            if len(boxes) == n:
                placed = boxes
                break
        if placed is None:
            raise DataError(f"could not place {n} objects in scene {sid}")
        classes = [int(rng.integers(0, cfg.num_classes)) for _ in placed]
        raster = render(list(zip(placed, classes)), cfg, rng)
        gts = [GroundTruth.of(b, c, cfg.num_classes) for b, c in zip(placed, classes)]
        scenes.append(Scene(raster=raster, gts=gts, id=sid, num_classes=cfg.num_classes))
    return scenes


# --------------------------------------------------------------- persistence

def scene_to_dict(scene: Scene) -> dict:
    h, w, ch = scene.raster.shape
    return {
        "schema": SCENE_SCHEMA,
        "id": int(scene.id),
        "height": h,
        "width": w,
        "channels": ch,
        "num_classes": int(scene.num_classes),
        "gts": [
            {"box": [g.box.l, g.box.t, g.box.r, g.box.b], "class": g.class_index}
            for g in scene.gts
        ],
        "raster": [float(v) for v in scene.raster.reshape(-1)],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema") != SCENE_SCHEMA:
        raise DataError(f"unsupported schema {d.get('schema')!r}")
    h, w, ch = int(d["height"]), int(d["width"]), int(d["channels"])
    raster = np.asarray(d["raster"], dtype=np.float64)
    if raster.size != h * w * ch:
        raise DataError("raster size does not match its header")
    nc = int(d["num_classes"])
    gts = [GroundTruth.of(Box.from_array(g["box"]), int(g["class"]), nc) for g in d["gts"]]
    return Scene(raster=raster.reshape(h, w, ch), gts=gts, id=int(d["id"]), num_classes=nc)


def save(scenes, path):
    """Write one scene per line. Floats use repr, so reloading is exact."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def load(path) -> list:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise DataError(f"{path}:{lineno}: truncated line")
            try:
                scenes.append(scene_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return scenes


def num_classes_of(scenes) -> int:
    for s in scenes:
        if s.num_classes:
            return s.num_classes
    raise DataError("dataset does not record a class count")
