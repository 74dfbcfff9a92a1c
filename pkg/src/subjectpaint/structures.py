"""Layout data model shared by every stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

MIN_BOX_SIZE = 1.0 / 64


class LayoutError(ValueError):
    pass


class SubjectCountError(LayoutError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    phrase: str
    is_subject: bool = False


@dataclass(frozen=True)
class BBox:
    """Normalized center-form box. Diffusion space is the affine image 2x - 1."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, width: float, height: float) -> "BBox":
        """From a top-left absolute-pixel box (COCO convention)."""
        return cls((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)

    def to_xywh(self, width: float, height: float) -> list[float]:
        return [(self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                self.w * width, self.h * height]

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def is_valid(self, tol: float = 1e-9) -> bool:
        x0, y0, x1, y1 = self.corners()
        return (self.w > 0 and self.h > 0 and x0 >= -tol and y0 >= -tol
                and x1 <= 1 + tol and y1 <= 1 + tol)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)


def clamp_geometry(g: np.ndarray, min_size: float = MIN_BOX_SIZE) -> np.ndarray:
    """Snap raw (cx, cy, w, h) rows onto valid boxes inside the unit canvas.

    Sizes are clipped first, then centres are moved inward so the box fits.
    """
    g = np.asarray(g, dtype=np.float64).copy()
    g[..., 2:] = np.clip(g[..., 2:], min_size, 1.0)
    half = g[..., 2:] / 2
    g[..., :2] = np.clip(g[..., :2], half, 1.0 - half)
    return g


def to_diffusion_space(g: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(g) - 1.0


def from_diffusion_space(z: np.ndarray) -> np.ndarray:
    return (np.asarray(z) + 1.0) / 2.0


@dataclass
class Layout:
    objects: list[ObjectSpec]
    boxes: list[BBox]
    caption: str = ""

    def __post_init__(self):
        if len(self.objects) != len(self.boxes):
            raise LayoutError(f"{len(self.objects)} objects but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def phrases(self) -> list[str]:
        return [o.phrase for o in self.objects]

    @property
    def subject_index(self) -> int:
        return require_one_subject(self.objects)

    def geometry(self) -> np.ndarray:
        return np.stack([b.as_array() for b in self.boxes]) if self.boxes else np.zeros((0, 4))

    def validate(self, max_objects: Optional[int] = None) -> None:
        if not self.objects:
            raise LayoutError("layout has no objects")
        if max_objects is not None and len(self) > max_objects:
            raise LayoutError(f"layout has {len(self)} objects, limit {max_objects}")
        require_one_subject(self.objects)
        for i, b in enumerate(self.boxes):
            if not b.is_valid():
                raise LayoutError(f"box {i} invalid: {b}")

    def with_geometry(self, g: np.ndarray) -> "Layout":
        boxes = [BBox(*map(float, row)) for row in np.asarray(g)]
        return Layout(list(self.objects), boxes, self.caption)

    def to_record(self) -> dict:
        return {
            "caption": self.caption,
            "objects": [
                {"phrase": o.phrase, "is_subject": o.is_subject,
                 "bbox": [b.cx, b.cy, b.w, b.h]}
                for o, b in zip(self.objects, self.boxes)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Layout":
        objs = [ObjectSpec(o["phrase"], bool(o.get("is_subject", False))) for o in rec["objects"]]
        boxes = [BBox(*map(float, o["bbox"])) for o in rec["objects"]]
        return cls(objs, boxes, rec.get("caption", ""))


def require_one_subject(objects: Iterable[ObjectSpec]) -> int:
    idx = [i for i, o in enumerate(objects) if o.is_subject]
    if len(idx) != 1:
        raise SubjectCountError(f"exactly one subject required, found {len(idx)}")
    return idx[0]


def write_layouts_jsonl(path, layouts: Iterable[Layout]) -> None:
    with open(path, "w") as fh:
        for layout in layouts:
            fh.write(json.dumps(layout.to_record(), sort_keys=True) + "\n")


def read_layouts_jsonl(path) -> list[Layout]:
    with open(path) as fh:
        return [Layout.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class SceneSample:
    """One training/eval record. ``image`` is HxWx3 float32 in [0, 1] or None when pixels are unavailable."""

    image: Optional[np.ndarray]
    layout: Layout
    instance_masks: np.ndarray
    subject_index: int
    sample_id: str = ""
    source_split: str = "train"
    height: int = 0
    width: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.layout)
        if self.instance_masks.shape[0] != n:
            raise LayoutError(f"{self.instance_masks.shape[0]} masks for {n} objects")
        if not 0 <= self.subject_index < n:
            raise LayoutError(f"subject_index {self.subject_index} out of range")
        if self.image is not None:
            self.height, self.width = self.image.shape[:2]
        elif not (self.height and self.width):
            self.height, self.width = self.instance_masks.shape[1:3]

    @property
    def caption(self) -> str:
        return self.layout.caption

    @property
    def objects(self) -> list[ObjectSpec]:
        return self.layout.objects
