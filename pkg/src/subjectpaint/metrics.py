"""Layout and image metrics: IoU, phrase-restricted optimal matching, Max. IoU @ k,
Frechet distance, COCO-style average precision and a palette oracle detector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .structures import BBox, Layout

COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class NotPSDError(ValueError):
    pass


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    return np.array([[iou(x, y) for y in b] for x in a], dtype=np.float64).reshape(len(a), len(b))


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]
    mean_iou: float


def phrase_iou_matrix(layout_a: Layout, layout_b: Layout) -> np.ndarray:
    """IoU where phrases agree, 0 elsewhere."""
    w = iou_matrix(layout_a.boxes, layout_b.boxes)
    same = np.array([[p == q for q in layout_b.phrases] for p in layout_a.phrases], dtype=bool)
    return np.where(same.reshape(w.shape), w, 0.0)


def optimal_match(layout_a: Layout, layout_b: Layout) -> MatchResult:
    """Maximum total IoU over equal-phrase pairs, normalized by max(|a|, |b|)."""
    w = phrase_iou_matrix(layout_a, layout_b)
    denom = max(len(layout_a), len(layout_b))
    if denom == 0 or w.size == 0:
        return MatchResult([], 0.0)
    rows, cols = linear_sum_assignment(-w)
    pa, pb = layout_a.phrases, layout_b.phrases
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if pa[r] == pb[c]]
    total = float(sum(w[r, c] for r, c in pairs))
    return MatchResult(pairs, total / denom)


def max_iou_at_k(generated: Sequence[Layout], ground_truth: Layout) -> float:
    if not generated:
        raise ValueError("need at least one generated layout")
    return max(optimal_match(g, ground_truth).mean_iou for g in generated)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> "GaussianSummary":
        features = np.asarray(features, dtype=np.float64)
        return cls(features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False)))


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.min() < -tol:
        raise NotPSDError(f"matrix has eigenvalue {vals.min():.3e} below -{tol:g}")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary, tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term uses tr((S_a^½ S_b S_a^½)^½), which shares its
    eigenvalues with (S_a S_b)^½ but stays symmetric.
    """
    ca, cb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    sa = _psd_sqrt(ca, tol)
    _psd_sqrt(cb, tol)
    cross = sa @ cb @ sa
    vals = np.linalg.eigvalsh((cross + cross.T) / 2)
    tr_cross = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = np.atleast_1d(a.mean) - np.atleast_1d(b.mean)
    d = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_cross)
    return max(d, 0.0)


@dataclass
class Detection:
    bbox: BBox
    category: str
    score: float = 1.0
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _ap_single(dets: list[tuple[int, Detection]], gts: Mapping[int, list[BBox]], n_gt: int,
               thr: float) -> float:
    # stable sort: equal scores keep ascending detection index
    order = sorted(dets, key=lambda item: (-item[1].score, item[0]))
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(order))
    for k, (_, det) in enumerate(order):
        boxes = gts.get(det.image_id, [])
        best, best_iou = -1, thr
        for j, g in enumerate(boxes):
            if used[det.image_id][j]:
                continue
            v = iou(det.bbox, g)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[det.image_id][best] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(np.mean(sampled))


def average_precision(detections: Sequence[Detection], ground_truth: Sequence[Sequence[Detection]],
                      iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> dict:
    """COCO-style AP. ``ground_truth[i]`` lists the objects of image i.

    Returns ``{"per_threshold": {thr: AP}, "AP": mean, "AP50": ..., "AP75": ...}``;
    categories without ground truth are left out of the category mean.
    """
    gts_by_cat: dict[str, dict[int, list[BBox]]] = {}
    for img, objs in enumerate(ground_truth):
        for g in objs:
            gts_by_cat.setdefault(g.category, {}).setdefault(img, []).append(g.bbox)
    dets_by_cat: dict[str, list[tuple[int, Detection]]] = {}
    for k, d in enumerate(detections):
        dets_by_cat.setdefault(d.category, []).append((k, d))
    per_thr = {}
    for thr in iou_thresholds:
        aps = []
        for cat, gts in sorted(gts_by_cat.items()):
            n_gt = sum(len(v) for v in gts.values())
            aps.append(_ap_single(dets_by_cat.get(cat, []), gts, n_gt, thr))
        per_thr[float(thr)] = float(np.mean(aps)) if aps else 0.0
    out = {"per_threshold": per_thr, "AP": float(np.mean(list(per_thr.values()))) if per_thr else 0.0}
    for name, thr in (("AP50", 0.5), ("AP75", 0.75)):
        if thr in per_thr:
            out[name] = per_thr[thr]
    return out


def oracle_detect(image: np.ndarray, palette: Mapping[str, tuple[int, int, int]],
                  tolerance: float = 0.1, image_id: int = 0) -> list[Detection]:
    """Connected components (4-connectivity) per palette color.

    A pixel belongs to a color when its L-inf distance to it is below
    ``tolerance`` (in [0, 1] units). Other pixels are ignored.
    """
    image = np.asarray(image, dtype=np.float64)[..., :3]
    h, w = image.shape[:2]
    names = list(palette)
    colors = np.array([palette[n] for n in names], dtype=np.float64) / 255.0
    dist = np.abs(image[:, :, None, :] - colors[None, None]).max(axis=-1)
    nearest = dist.argmin(axis=-1)
    ok = dist.min(axis=-1) < tolerance
    dets = []
    for ci, name in enumerate(names):
        labels, n = ndimage.label(ok & (nearest == ci))
        for sl in ndimage.find_objects(labels):
            ys, xs = sl
            dets.append(Detection(BBox.from_xywh(xs.start, ys.start, xs.stop - xs.start,
                                                 ys.stop - ys.start, w, h), name, 1.0, image_id))
    return dets


def detections_to_coco(dets: Sequence[Detection], width: int, height: int) -> list[dict]:
    return [{"image_id": d.image_id, "category": d.category,
             "bbox": d.bbox.to_xywh(width, height), "score": d.score} for d in dets]


def detections_from_coco(records: Sequence[dict], width: int, height: int) -> list[Detection]:
    return [Detection(BBox.from_xywh(*r["bbox"], width, height), r["category"], float(r["score"]),
                      int(r["image_id"])) for r in records]
