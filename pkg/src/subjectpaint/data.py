"""Dataset ingestion (COCO 2017 JSON), filtering/splitting and the synthetic scene grammar."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import jsonschema
import numpy as np
from PIL import Image, ImageDraw

from .structures import BBox, Layout, ObjectSpec, SceneSample

log = logging.getLogger(__name__)

MIN_OBJECTS, MAX_OBJECTS = 3, 8


class SchemaViolationError(ValueError):
    pass


class GrammarUnsatisfiableError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# COCO ingestion

_INSTANCES_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {"type": "array", "items": {
            "type": "object", "required": ["id", "width", "height"],
            "properties": {"id": {"type": "integer"}, "width": {"type": "integer", "minimum": 1},
                           "height": {"type": "integer", "minimum": 1}, "file_name": {"type": "string"}}}},
        "annotations": {"type": "array", "items": {
            "type": "object", "required": ["id", "image_id", "category_id", "bbox"],
            "properties": {
                "id": {"type": "integer"}, "image_id": {"type": "integer"},
                "category_id": {"type": "integer"},
                "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                "iscrowd": {"type": "integer", "enum": [0, 1]},
                "segmentation": {"anyOf": [
                    {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                    {"type": "object", "required": ["counts", "size"]}]}}}},
        "categories": {"type": "array", "items": {
            "type": "object", "required": ["id", "name"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"}}}},
    },
}

_CAPTIONS_SCHEMA = {
    "type": "object",
    "required": ["annotations"],
    "properties": {"annotations": {"type": "array", "items": {
        "type": "object", "required": ["id", "image_id", "caption"],
        "properties": {"id": {"type": "integer"}, "image_id": {"type": "integer"},
                       "caption": {"type": "string"}}}}},
}


def _validate(doc, schema, source) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as err:
        raise SchemaViolationError(f"{source}: {err.json_path}: {err.message}") from None


def decode_rle_string(s: str) -> list[int]:
    """COCO compressed RLE counts (LEB128-like, 6 bits per char, delta-coded from index 3)."""
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = decode_rle_string(counts.decode() if isinstance(counts, bytes) else counts)
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        flat[pos:pos + c] = val
        pos += c
        val = not val
    return flat.reshape((w, h)).T


def polygons_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        if len(poly) >= 6:
            draw.polygon([(poly[i], poly[i + 1]) for i in range(0, len(poly) - 1, 2)], fill=1)
    return np.asarray(img, dtype=bool)


def _segmentation_mask(ann: dict, height: int, width: int) -> np.ndarray:
    seg = ann.get("segmentation")
    if isinstance(seg, dict):
        return rle_to_mask(seg)
    if seg:
        return polygons_to_mask(seg, height, width)
    x, y, w, h = ann["bbox"]
    mask = np.zeros((height, width), dtype=bool)
    mask[int(math.floor(y)):int(math.ceil(y + h)), int(math.floor(x)):int(math.ceil(x + w))] = True
    return mask


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def ingest_coco(instances_json, captions_json, image_root=None, split: str = "train",
                seed: int = 0) -> list[SceneSample]:
    """Build SceneSamples from COCO 2017 instances + captions files.

    Crowd annotations are dropped. The caption with the lowest id is used. The
    subject is drawn uniformly per image from a generator seeded with ``seed``.
    Images without annotations or captions are skipped.
    """
    with open(instances_json) as fh:
        inst = json.load(fh)
    with open(captions_json) as fh:
        caps = json.load(fh)
    _validate(inst, _INSTANCES_SCHEMA, str(instances_json))
    _validate(caps, _CAPTIONS_SCHEMA, str(captions_json))

    cat_names = {c["id"]: c["name"] for c in inst["categories"]}
    captions: dict[int, tuple[int, str]] = {}
    for c in caps["annotations"]:
        best = captions.get(c["image_id"])
        if best is None or c["id"] < best[0]:
            captions[c["image_id"]] = (c["id"], c["caption"].strip())
    anns_by_image: dict[int, list[dict]] = {}
    for i, a in enumerate(inst["annotations"]):
        if a.get("iscrowd", 0):
            continue
        if a["category_id"] not in cat_names:
            raise SchemaViolationError(f"{instances_json}: $.annotations[{i}].category_id: unknown category")
        anns_by_image.setdefault(a["image_id"], []).append(a)

    rng = np.random.default_rng(seed)
    samples, no_caption = [], 0
    for img in sorted(inst["images"], key=lambda im: im["id"]):
        anns = sorted(anns_by_image.get(img["id"], []), key=lambda a: a["id"])
        if not anns:
            continue
        if img["id"] not in captions:
            no_caption += 1
            continue
        W, H = img["width"], img["height"]
        subject = int(rng.integers(len(anns)))
        objects = [ObjectSpec(cat_names[a["category_id"]], i == subject) for i, a in enumerate(anns)]
        boxes = [_clip_box(BBox.from_xywh(*a["bbox"], W, H)) for a in anns]
        masks = np.stack([_segmentation_mask(a, H, W) for a in anns])
        image = None
        if image_root is not None and "file_name" in img:
            path = Path(image_root) / img["file_name"]
            if path.exists():
                image = load_rgb(path)
        samples.append(SceneSample(image, Layout(objects, boxes, captions[img["id"]][1]), masks,
                                   subject, sample_id=str(img["id"]), source_split=split,
                                   height=H, width=W))
    if no_caption:
        log.info("skipped %d images without captions", no_caption)
    return samples


def _clip_box(b: BBox) -> BBox:
    x0, y0, x1, y1 = (min(max(v, 0.0), 1.0) for v in b.corners())
    if x1 <= x0 or y1 <= y0:
        return b
    return BBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]


def filter_and_split(samples: Sequence[SceneSample], rng: np.random.Generator,
                     train_fraction: float = 0.95) -> DatasetSplit:
    """Keep 3..8-object samples; train source -> train/val, val source -> test."""
    keep = [i for i, s in enumerate(samples) if MIN_OBJECTS <= len(s.layout) <= MAX_OBJECTS]
    source_train = [i for i in keep if samples[i].source_split == "train"]
    test = [i for i in keep if samples[i].source_split != "train"]
    perm = [source_train[j] for j in rng.permutation(len(source_train))]
    n_train = int(math.floor(train_fraction * len(perm) + 0.5))
    return DatasetSplit(sorted(perm[:n_train]), sorted(perm[n_train:]), test)


def extract_subject(sample: SceneSample) -> np.ndarray:
    """Tight RGBA crop of the subject; alpha is 0 outside its instance mask."""
    mask = sample.instance_masks[sample.subject_index]
    if not mask.any():
        raise EmptyMaskError(f"subject mask of sample {sample.sample_id!r} is empty")
    if sample.image is None:
        raise ValueError(f"sample {sample.sample_id!r} has no pixels")
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = np.zeros((y1 - y0, x1 - x0, 4), dtype=np.float32)
    crop[..., :3] = sample.image[y0:y1, x0:x1]
    crop[..., 3] = mask[y0:y1, x0:x1]
    crop[..., :3] *= crop[..., 3:]
    return crop


# ---------------------------------------------------------------------------
# Synthetic scene grammar


@dataclass
class ThingRule:
    name: str
    color: tuple[int, int, int]
    shape: str  # "rect" | "ellipse"
    width: tuple[int, int]
    height: tuple[int, int]
    region: str = "ground"  # "ground" (rests on ground band) | "sky" (inside sky band)
    max_count: int = 2


def _default_things() -> list[ThingRule]:
    return [
        ThingRule("sun", (255, 220, 0), "ellipse", (4, 7), (4, 7), region="sky", max_count=1),
        ThingRule("tree", (0, 90, 40), "ellipse", (5, 9), (8, 14)),
        ThingRule("house", (200, 50, 50), "rect", (8, 13), (7, 12)),
        ThingRule("dog", (150, 95, 40), "rect", (5, 9), (3, 6)),
        ThingRule("car", (40, 40, 210), "rect", (8, 13), (4, 6)),
        ThingRule("person", (235, 120, 210), "ellipse", (3, 5), (8, 13)),
    ]


@dataclass
class SyntheticGrammar:
    """Sky band above a ground band, things resting on the ground (the sun sits in the sky)."""

    size: int = 32
    sky_color: tuple[int, int, int] = (120, 180, 255)
    ground_color: tuple[int, int, int] = (60, 160, 60)
    horizon: tuple[float, float] = (0.35, 0.55)
    things: list[ThingRule] = field(default_factory=_default_things)
    count_range: tuple[int, int] = (3, 8)
    min_visible: float = 0.4
    captions: list[str] = field(default_factory=lambda: [
        "a {subject} on the grass under a blue sky",
        "a photo of a {subject} next to a {other}",
        "a {subject} and a {other} outdoors",
        "a sunny field with a {subject}",
    ])

    @property
    def palette(self) -> dict[str, tuple[int, int, int]]:
        pal = {"sky": tuple(self.sky_color), "ground": tuple(self.ground_color)}
        pal.update({t.name: tuple(t.color) for t in self.things})
        return pal

    def validate(self) -> None:
        colors = list(self.palette.values())
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be unique per category")
        lo, hi = self.count_range
        if not 3 <= lo <= hi:
            raise ValueError("count_range must start at >= 3 (sky + ground + a thing)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticGrammar":
        d = dict(d)
        if "things" in d:
            d["things"] = [ThingRule(**{k: tuple(v) if isinstance(v, list) else v for k, v in t.items()})
                           for t in d["things"]]
        for k in ("sky_color", "ground_color", "horizon", "count_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticGrammar":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            return cls.from_dict(yaml.safe_load(text))
        return cls.from_dict(json.loads(text))

    def thing(self, name: str) -> Optional[ThingRule]:
        return next((t for t in self.things if t.name == name), None)

    def check_layout(self, layout: Layout, tol: float = 0.02) -> list[str]:
        """Rule violations of a (possibly generated) layout; empty when it conforms."""
        problems = []
        by_name = {}
        for o, b in zip(layout.objects, layout.boxes):
            by_name.setdefault(o.phrase, []).append(b)
        sky, ground = by_name.get("sky", []), by_name.get("ground", [])
        if sky and ground:
            if not sky[0].cy < ground[0].cy:
                problems.append("sky is not above ground")
            horizon = ground[0].corners()[1]
            for o, b in zip(layout.objects, layout.boxes):
                rule = self.thing(o.phrase)
                if rule is None:
                    continue
                if rule.region == "ground" and b.corners()[3] < horizon - tol:
                    problems.append(f"{o.phrase} floats above the ground")
                if rule.region == "sky" and b.cy > horizon + tol:
                    problems.append(f"{o.phrase} is below the horizon")
        return problems


def sky_above_ground(layout: Layout) -> Optional[bool]:
    """None when the layout lacks a sky or ground object."""
    sky = [b for o, b in zip(layout.objects, layout.boxes) if o.phrase == "sky"]
    ground = [b for o, b in zip(layout.objects, layout.boxes) if o.phrase == "ground"]
    if not sky or not ground:
        return None
    return sky[0].cy < ground[0].cy


def _rect_mask(size, x0, y0, x1, y1):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def _ellipse_mask(size, x0, y0, x1, y1):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def render_scene(grammar: SyntheticGrammar, items: Sequence[tuple[str, tuple[int, int, int, int]]]):
    """Paint (name, pixel box) items in order; returns image and visible-pixel masks."""
    size = grammar.size
    palette = grammar.palette
    image = np.zeros((size, size, 3), dtype=np.float32)
    owner = np.full((size, size), -1, dtype=np.int64)
    for i, (name, (x0, y0, x1, y1)) in enumerate(items):
        rule = grammar.thing(name)
        shape = rule.shape if rule else "rect"
        m = (_ellipse_mask if shape == "ellipse" else _rect_mask)(size, x0, y0, x1, y1)
        image[m] = np.asarray(palette[name], dtype=np.float32) / 255.0
        owner[m] = i
    masks = np.stack([owner == i for i in range(len(items))])
    return image, masks


def _sample_items(grammar: SyntheticGrammar, rng: np.random.Generator):
    size = grammar.size
    horizon = int(round(rng.uniform(*grammar.horizon) * size))
    n = int(rng.integers(grammar.count_range[0], grammar.count_range[1] + 1))
    counts: dict[str, int] = {}
    items = [("sky", (0, 0, size, horizon)), ("ground", (0, horizon, size, size))]
    things = []
    while len(things) < n - 2:
        rule = grammar.things[int(rng.integers(len(grammar.things)))]
        if counts.get(rule.name, 0) >= rule.max_count:
            continue
        counts[rule.name] = counts.get(rule.name, 0) + 1
        w = int(rng.integers(rule.width[0], rule.width[1] + 1))
        h = int(rng.integers(rule.height[0], rule.height[1] + 1))
        x0 = int(rng.integers(0, size - w + 1))
        if rule.region == "sky":
            if horizon - h < 0:
                return None
            y0 = int(rng.integers(0, horizon - h + 1))
        else:
            lo = max(horizon + 2, h)
            if lo > size:
                return None
            y1 = int(rng.integers(lo, size + 1))
            y0 = y1 - h
        things.append((rule.name, (x0, y0, x0 + w, y0 + h)))
    # sky things first, then ground things far to near
    things.sort(key=lambda it: (grammar.thing(it[0]).region != "sky", it[1][3]))
    return items + things


def synth_generate(grammar: SyntheticGrammar, count: int, rng: np.random.Generator,
                   prefix: str = "s", split: str = "train") -> list[SceneSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    grammar.validate()
    size = grammar.size
    samples = []
    for k in range(count):
        for _ in range(1000):
            items = _sample_items(grammar, rng)
            if items is None:
                continue
            image, masks = render_scene(grammar, items)
            full = [render_scene(grammar, [it])[1][0].sum() for it in items]
            visible = masks.sum(axis=(1, 2))
            if all(v >= grammar.min_visible * f and v > 0 for v, f in zip(visible, full)):
                break
        else:
            raise GrammarUnsatisfiableError("no valid scene after 1000 attempts")
        thing_idx = [i for i, (name, _) in enumerate(items) if grammar.thing(name) is not None]
        subject = thing_idx[int(rng.integers(len(thing_idx)))]
        others = [items[i][0] for i in thing_idx if i != subject] or ["ground"]
        template = grammar.captions[int(rng.integers(len(grammar.captions)))]
        caption = template.format(subject=items[subject][0], other=others[int(rng.integers(len(others)))])
        objects = [ObjectSpec(name, i == subject) for i, (name, _) in enumerate(items)]
        boxes = [BBox.from_xywh(x0, y0, x1 - x0, y1 - y0, size, size) for _, (x0, y0, x1, y1) in items]
        samples.append(SceneSample(image, Layout(objects, boxes, caption), masks, subject,
                                   sample_id=f"{prefix}{k:05d}", source_split=split))
    return samples


# ---------------------------------------------------------------------------
# Dataset directories: PNGs plus a JSON-lines index


def _to_png_array(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(_to_png_array(image)).save(path, format="PNG", optimize=False)


def write_dataset(root, splits: dict[str, Sequence[SceneSample]]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    with open(root / "index.jsonl", "w") as fh:
        for split, samples in splits.items():
            for s in samples:
                rec = {"id": s.sample_id, "split": split, "subject_index": s.subject_index,
                       "height": s.height, "width": s.width, **s.layout.to_record()}
                if s.image is not None:
                    rec["image"] = f"images/{s.sample_id}.png"
                    save_png(root / rec["image"], s.image)
                rec["masks"] = []
                for j, m in enumerate(s.instance_masks):
                    rel = f"masks/{s.sample_id}_{j}.png"
                    Image.fromarray(m.astype(np.uint8) * 255).save(root / rel, format="PNG")
                    rec["masks"].append(rel)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return root


def read_dataset(root, split: Optional[str] = None) -> list[SceneSample]:
    root = Path(root)
    out = []
    with open(root / "index.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if split is not None and rec["split"] != split:
                continue
            layout = Layout.from_record(rec)
            masks = np.stack([np.asarray(Image.open(root / m)) > 127 for m in rec["masks"]])
            image = load_rgb(root / rec["image"]) if "image" in rec else None
            out.append(SceneSample(image, layout, masks, rec["subject_index"], sample_id=rec["id"],
                                   source_split=rec["split"], height=rec["height"], width=rec["width"]))
    return out


def dataset_root(path=None) -> Path:
    """Explicit path wins; otherwise SCENEBOOTH_DATA, otherwise ./data."""
    if path is not None:
        return Path(path)
    return Path(os.environ.get("SCENEBOOTH_DATA", "data"))
