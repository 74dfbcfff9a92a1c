"""End-to-end orchestration used by the command line: dataset preparation, both
training stages, generation, subject dragging and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, load_checkpoint, save_checkpoint
from .data import (SyntheticGrammar, extract_subject, filter_and_split, ingest_coco, read_dataset, save_png,
                   sky_above_ground, synth_generate, write_dataset)
from .encoders import toy_vision_encode
from .layoutgen import LayoutDenoiser, LayoutTrainingExample, sample_layouts_batch, train_layout_model
from .metrics import (Detection, GaussianSummary, average_precision, frechet_distance, max_iou_at_k,
                      oracle_detect)
from .paintnet import (PaintUNet, bbox_to_pixel_rect, generate_batch, pretrain_base, train_paintnet)
from .structures import BBox, Layout, ObjectSpec, SceneSample

log = logging.getLogger(__name__)

REPORT_SCHEMA = Path(__file__).with_name("report.schema.json")


class DragError(ValueError):
    pass


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _grammar(cfg: RunConfig) -> SyntheticGrammar:
    g = SyntheticGrammar.load(cfg.data.grammar) if cfg.data.grammar else SyntheticGrammar()
    g.size = cfg.data.image_size
    return g


# ---------------------------------------------------------------------------
# datasets


def synth_dataset(cfg: RunConfig, out) -> Path:
    grammar = _grammar(cfg)
    rng = np.random.default_rng(cfg.seed)
    splits = {
        "train": synth_generate(grammar, cfg.data.train_count, rng, prefix="train", split="train"),
        "val": synth_generate(grammar, cfg.data.val_count, rng, prefix="val", split="val"),
        "test": synth_generate(grammar, cfg.data.test_count, rng, prefix="test", split="test"),
    }
    root = write_dataset(out, splits)
    _write_json(root / "grammar.json", grammar.to_dict())
    _write_json(root / "config.json", cfg.to_dict())
    return root


def ingest_dataset(instances, captions, out, seed: int = 0, image_root=None, test_instances=None,
                   test_captions=None) -> Path:
    """Train source -> 95/5 train/val; an optional second (official val) pair becomes test."""
    samples = ingest_coco(instances, captions, image_root, split="train", seed=seed)
    if test_instances is not None:
        samples += ingest_coco(test_instances, test_captions, image_root, split="val", seed=seed)
    split = filter_and_split(samples, np.random.default_rng(seed))
    return write_dataset(out, {name: [samples[i] for i in getattr(split, name)]
                               for name in ("train", "val", "test")})


def load_grammar(data_root) -> SyntheticGrammar:
    path = Path(data_root) / "grammar.json"
    return SyntheticGrammar.load(path) if path.exists() else SyntheticGrammar()


# ---------------------------------------------------------------------------
# training


class _LossLog:
    def __init__(self, path, append: bool):
        self.fh = open(path, "a" if append else "w")

    def __call__(self, rec):
        self.fh.write(json.dumps(rec) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _segments(total: int, every: int, start: int):
    step = start
    while step < total:
        n = min(every, total - step)
        yield step, n
        step += n


def train_layout_stage(cfg: RunConfig, data_root, out_dir, resume=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", cfg.to_dict())
    train = read_dataset(data_root, "train")
    if not train:
        raise ValueError(f"no training samples under {data_root}")
    examples = [LayoutTrainingExample(extract_subject(s), s.layout) for s in train]
    ckpt_path = out_dir / "layout.ckpt"
    model, opt_state, step = None, None, 0
    if resume is not None:
        payload = load_checkpoint(resume, "layout")
        torch.manual_seed(cfg.seed)
        model = LayoutDenoiser(cfg.layout_model)
        model.load_state_dict(payload["state_dict"])
        opt_state, step = payload["optimizer"], payload["step"]
    loss_log = _LossLog(out_dir / "layout_loss.jsonl", append=resume is not None)
    try:
        for start, n in _segments(cfg.layout_train.steps, cfg.checkpoint_every, step):
            seg_cfg = dataclasses.replace(cfg.layout_train, steps=n, log_every=1)
            model, tlog = train_layout_model(examples, cfg.layout_model, seg_cfg, cfg.seed, model=model,
                                             start_step=start, on_log=loss_log, optimizer_state=opt_state)
            opt_state = tlog.optimizer_state
            save_checkpoint(ckpt_path, "layout", model, cfg, optimizer=opt_state, step=start + n)
    finally:
        loss_log.close()
    return ckpt_path


def train_paint_stage(cfg: RunConfig, data_root, out_dir, resume=None) -> Path:
    """Base pretraining (stand-in for a pretrained backbone), then adapter training."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", cfg.to_dict())
    train = read_dataset(data_root, "train")
    if not train:
        raise ValueError(f"no training samples under {data_root}")
    ckpt_path = out_dir / "paint.ckpt"
    torch.manual_seed(cfg.seed)
    model = PaintUNet(cfg.paint_model)
    phase, opt_state, step = "base", None, 0
    if resume is not None:
        payload = load_checkpoint(resume, "paint")
        model.load_state_dict(payload["state_dict"])
        phase, opt_state, step = payload["phase"], payload["optimizer"], payload["step"]
        base_sum = payload.get("base_checksum")
    append = resume is not None
    if phase == "base":
        base_log = _LossLog(out_dir / "base_loss.jsonl", append)
        try:
            for start, n in _segments(cfg.base_pretrain.steps, cfg.checkpoint_every, step):
                seg = dataclasses.replace(cfg.base_pretrain, steps=n, log_every=1)
                tlog = pretrain_base(model, train, seg, cfg.seed, on_log=base_log, start_step=start,
                                     optimizer_state=opt_state)
                opt_state = tlog.optimizer_state
                save_checkpoint(ckpt_path, "paint", model, cfg, optimizer=opt_state, step=start + n, phase="base")
        finally:
            base_log.close()
        model.reset_control_from_base()
        base_sum = model.base_checksum()
        phase, opt_state, step, append = "adapters", None, 0, False
    paint_log = _LossLog(out_dir / "paint_loss.jsonl", append)
    try:
        for start, n in _segments(cfg.paint_train.steps, cfg.checkpoint_every, step):
            seg = dataclasses.replace(cfg.paint_train, steps=n, log_every=1)
            model, tlog = train_paintnet(train, cfg.paint_model, seg, cfg.seed + 1, model=model, start_step=start,
                                         on_log=paint_log, optimizer_state=opt_state)
            opt_state = tlog.optimizer_state
            save_checkpoint(ckpt_path, "paint", model, cfg, optimizer=opt_state, step=start + n, phase="adapters",
                            base_checksum=base_sum)
    finally:
        paint_log.close()
    if cfg.paint_train.steps == 0:
        save_checkpoint(ckpt_path, "paint", model, cfg, optimizer=None, step=0, phase="adapters",
                        base_checksum=base_sum)
    return ckpt_path


def load_layout_model(path) -> LayoutDenoiser:
    payload = load_checkpoint(path, "layout")
    model = LayoutDenoiser(payload["run_config"].layout_model)
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_paint_model(path) -> PaintUNet:
    payload = load_checkpoint(path, "paint")
    model = PaintUNet(payload["run_config"].paint_model)
    model.load_state_dict(payload["state_dict"])
    return model.eval()


# ---------------------------------------------------------------------------
# generation


def parse_phrases(items: Sequence[str]) -> list[ObjectSpec]:
    """Phrases with a leading ``*`` mark the subject, e.g. ``sky ground *dog``."""
    out = []
    for item in items:
        for part in item.split(","):
            part = part.strip()
            if part:
                out.append(ObjectSpec(part.lstrip("*").strip(), part.startswith("*")))
    return out


def load_subject(path) -> np.ndarray:
    """RGBA float image; images without alpha count as fully opaque."""
    with Image.open(path) as im:
        im = im.convert("RGBA")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr[..., 3] = (arr[..., 3] > 0.5).astype(np.float32)
    return arr


def generate_end_to_end(subject: np.ndarray, caption: str, phrases: Sequence[ObjectSpec], k: int, seed: int,
                        layout_model: LayoutDenoiser, paint_model: PaintUNet, all_k: bool = False):
    """Layouts -> rescale-and-paste -> painting -> composite. Returns (layouts, generations)."""
    layouts = sample_layouts_batch(layout_model, [subject], [list(phrases)], [caption], k, seed)[0]
    chosen = layouts if all_k else layouts[:1]
    gens = generate_batch(paint_model, [subject] * len(chosen), chosen, seed)
    return layouts, gens


def run_generate(subject_path, caption: str, phrases: Sequence[str], k: int, seed: int, layout_ckpt, paint_ckpt,
                 out_dir, all_k: bool = False) -> dict:
    for p in (layout_ckpt, paint_ckpt):
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    subject = load_subject(subject_path)
    objs = parse_phrases(phrases)
    layouts, gens = generate_end_to_end(subject, caption, objs, k, seed, load_layout_model(layout_ckpt),
                                        load_paint_model(paint_ckpt), all_k)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = []
    for j, g in enumerate(gens):
        name = f"gen_{j}.png"
        save_png(out_dir / name, g.image)
        images.append(name)
    with open(out_dir / "layouts.jsonl", "w") as fh:
        for lay in layouts:
            fh.write(json.dumps(lay.to_record(), sort_keys=True) + "\n")
    size = gens[0].image.shape[0]
    record = {"subject": str(Path(subject_path).resolve()), "caption": caption, "phrases": list(phrases),
              "k": k, "seed": seed, "layout_ckpt": str(Path(layout_ckpt).resolve()),
              "paint_ckpt": str(Path(paint_ckpt).resolve()), "images": images,
              "layout": gens[0].layout.to_record(),
              "subject_rect": list(bbox_to_pixel_rect(gens[0].layout.boxes[gens[0].layout.subject_index],
                                                      size, size))}
    _write_json(out_dir / "record.json", record)
    return record


def drag_rect(rect, dx: float, dy: float, width: int, height: int) -> tuple[tuple[int, int, int, int], int, int]:
    """Shift a pixel rectangle by (dx, dy) canvas fractions, snapped to whole pixels and
    clamped so the box stays on the canvas when it fits."""
    x0, y0, x1, y1 = rect
    sx, sy = int(np.floor(dx * width + 0.5)), int(np.floor(dy * height + 0.5))
    if x0 + sx >= width or x1 + sx <= 0 or y0 + sy >= height or y1 + sy <= 0:
        raise DragError(f"shift ({dx}, {dy}) moves the subject box fully off the canvas")
    if x1 - x0 <= width:
        sx = int(np.clip(sx, -x0, width - x1))
    if y1 - y0 <= height:
        sy = int(np.clip(sy, -y0, height - y1))
    return (x0 + sx, y0 + sy, x1 + sx, y1 + sy), sx, sy


def run_drag(record_path, dx: float, dy: float, seed: Optional[int], out_dir) -> dict:
    """Repaint with the subject moved; seed=None reuses the generation's seed."""
    record = json.loads(Path(record_path).read_text())
    if seed is None:
        seed = record["seed"]
    layout = Layout.from_record(record["layout"])
    paint = load_paint_model(record["paint_ckpt"])
    subject = load_subject(record["subject"])
    size = paint.cfg.image_size
    s = layout.subject_index
    rect, sx, sy = drag_rect(tuple(record["subject_rect"]), dx, dy, size, size)
    boxes = list(layout.boxes)
    boxes[s] = boxes[s].translated(sx / size, sy / size)
    moved = Layout(list(layout.objects), boxes, layout.caption)
    gen = generate_batch(paint, [subject], [moved], seed, rects=[rect])[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(out_dir / "drag.png", gen.image)
    new_record = dict(record, layout=moved.to_record(), subject_rect=list(rect), seed=seed,
                      images=["drag.png"], drag={"dx": dx, "dy": dy, "pixels": [sx, sy]})
    _write_json(out_dir / "record.json", new_record)
    return new_record


# ---------------------------------------------------------------------------
# evaluation


def _chunks(n: int, size: int):
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def evaluate(cfg: RunConfig, samples: Sequence[SceneSample], layout_model: Optional[LayoutDenoiser],
             paint_model: Optional[PaintUNet], k: int, seed: int, workers: int = 1,
             grammar: Optional[SyntheticGrammar] = None, gt_as_generated: bool = False) -> tuple[dict, list[dict]]:
    """Max. IoU @ {1,3,5} (capped at k), toy-FID and oracle-detector AP.

    Work is split into fixed-size chunks seeded by (seed, chunk index), so the
    report does not depend on the worker count.
    """
    grammar = grammar or SyntheticGrammar()
    samples = list(samples)[:cfg.eval.max_samples]
    subjects = [extract_subject(s) for s in samples]
    chunks = _chunks(len(samples), cfg.eval.chunk_size)

    def layouts_for(ci, idx):
        if gt_as_generated or layout_model is None:
            return [[samples[i].layout] * k for i in idx]
        return sample_layouts_batch(layout_model, [subjects[i] for i in idx], [samples[i].layout.objects for i in idx],
                                    [samples[i].layout.caption for i in idx], k, seed * 100003 + ci)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        generated = [lay for part in pool.map(lambda a: layouts_for(*a), enumerate(chunks)) for lay in part]

    per_sample = [{"id": s.sample_id} for s in samples]
    report: dict = {"num_samples": len(samples), "k": k, "seed": seed}
    for j in (1, 3, 5):
        if j > k:
            continue
        scores = [max_iou_at_k(g[:j], s.layout) for g, s in zip(generated, samples)]
        report[f"max_iou@{j}"] = float(np.mean(scores)) if scores else 0.0
        for rec, v in zip(per_sample, scores):
            rec[f"max_iou@{j}"] = float(v)
    flags = [sky_above_ground(l) for g in generated for l in g]
    flags = [f for f in flags if f is not None]
    report["sky_above_ground"] = float(np.mean(flags)) if flags else None
    rule_ok = [not grammar.check_layout(l) for g in generated for l in g]
    report["rule_pass_rate"] = float(np.mean(rule_ok)) if rule_ok else None

    if paint_model is not None:
        source = [g[0] for g in generated] if cfg.eval.layout_source == "generated" else [s.layout for s in samples]

        def paint(ci, idx):
            return generate_batch(paint_model, [subjects[i] for i in idx], [source[i] for i in idx],
                                  seed * 100003 + ci)

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            gens = [g for part in pool.map(lambda a: paint(*a), enumerate(chunks)) for g in part]
        real = GaussianSummary.from_features(np.stack([toy_vision_encode(s.image) for s in samples]))
        fake = GaussianSummary.from_features(np.stack([toy_vision_encode(g.image) for g in gens]))
        report["toy_fid"] = frechet_distance(real, fake)
        dets, gts = [], []
        for i, (g, lay) in enumerate(zip(gens, source)):
            found = oracle_detect(g.image, grammar.palette, cfg.eval.detect_tolerance, image_id=i)
            dets += found
            gts.append([Detection(b, o.phrase, 1.0, i) for o, b in zip(lay.objects, lay.boxes)])
            per_sample[i]["detections"] = len(found)
            per_sample[i]["subject_preserved"] = bool(np.array_equal(g.image[g.mask == 0], g.pasted[g.mask == 0]))
        ap = average_precision(dets, gts)
        report["yolo_AP"], report["yolo_AP50"], report["yolo_AP75"] = ap["AP"], ap["AP50"], ap["AP75"]
    return report, per_sample


def run_evaluate(cfg: RunConfig, data_root, layout_ckpt, paint_ckpt, k: int, seed: int, out_dir,
                 workers: int = 1, gt_as_generated: bool = False) -> dict:
    samples = read_dataset(data_root, "test")
    if not samples:
        raise ValueError(f"no test samples under {data_root}")
    layout_model = load_layout_model(layout_ckpt) if layout_ckpt else None
    paint_model = load_paint_model(paint_ckpt) if paint_ckpt else None
    report, per_sample = evaluate(cfg, samples, layout_model, paint_model, k, seed, workers,
                                  load_grammar(data_root), gt_as_generated)
    validate_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", report)
    with open(out_dir / "per_sample.jsonl", "w") as fh:
        for rec in per_sample:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, json.loads(REPORT_SCHEMA.read_text()))
