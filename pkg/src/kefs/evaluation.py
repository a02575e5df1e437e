"""GZSD scoring: IoU matching, AP/mAP, Recall@k, harmonic mean, classification
accuracy and silhouette.

AP uses all-points interpolation (area under the monotone precision envelope).
Detections are ranked by descending score with ties kept in input order; each
detection claims the unmatched ground truth of its image and class with the
highest IoU, and anything unclaimed at the threshold is a false positive.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, InputDataError

INTERPOLATION = "all-points"


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: object
    class_id: int
    box: tuple

    def __post_init__(self):
        _check_box(self.box, self.image_id)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: object
    class_id: int
    box: tuple
    score: float

    def __post_init__(self):
        _check_box(self.box, self.image_id)
        if not np.isfinite(self.score):
            raise InputDataError(f"non-finite detection score in image {self.image_id!r}")


def _check_box(box, image_id):
    if len(box) != 4 or not all(np.isfinite(box)):
        raise InputDataError(f"box {box!r} in image {image_id!r} is not four finite numbers")
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise InputDataError(f"degenerate box {list(box)} in image {image_id!r}")


def load_ground_truth(records: Iterable[Mapping]) -> list:
    try:
        return [GroundTruthRecord(r["image_id"], int(r["class_id"]), tuple(map(float, r["box"]))) for r in records]
    except KeyError as exc:
        raise InputDataError(f"ground-truth record missing key {exc}") from None


def load_detections(records: Iterable[Mapping]) -> list:
    try:
        return [
            DetectionRecord(r["image_id"], int(r["class_id"]), tuple(map(float, r["box"])), float(r["score"]))
            for r in records
        ]
    except KeyError as exc:
        raise InputDataError(f"detection record missing key {exc}") from None


def iou(a, b) -> float:
    return float(_kernels.iou_matrix([a], [b])[0, 0])


def _ranked(dets: Sequence[DetectionRecord]) -> list:
    # stable sort keeps input order among equal scores
    return sorted(dets, key=lambda d: -d.score)


def _hits(ranked: Sequence[DetectionRecord], gts: Sequence[GroundTruthRecord], iou_thresh: float) -> np.ndarray:
    """True-positive flag per ranked detection, matching within (image, class)."""
    gt_by_key = defaultdict(list)
    for g in gts:
        gt_by_key[(g.image_id, g.class_id)].append(g.box)
    det_by_key = defaultdict(list)
    for pos, d in enumerate(ranked):
        det_by_key[(d.image_id, d.class_id)].append(pos)
    hits = np.zeros(len(ranked))
    for key, positions in det_by_key.items():
        boxes = gt_by_key.get(key)
        if not boxes:
            continue
        overlaps = _kernels.iou_matrix([ranked[p].box for p in positions], boxes)
        matched = _kernels.greedy_match(overlaps, iou_thresh)
        hits[np.asarray(positions)[matched >= 0]] = 1.0
    return hits


def average_precision(dets, gts, class_id: int, iou_thresh: float = 0.5) -> float | None:
    """AP for one class; ``None`` when the class has no ground truth."""
    cls_gts = [g for g in gts if g.class_id == class_id]
    if not cls_gts:
        return None
    ranked = _ranked([d for d in dets if d.class_id == class_id])
    return float(_kernels.average_precision_from_hits(_hits(ranked, cls_gts, iou_thresh), len(cls_gts)))


def per_class_ap(dets, gts, class_set: Iterable[int], iou_thresh: float = 0.5) -> dict:
    out = {}
    for c in class_set:
        ap = average_precision(dets, gts, c, iou_thresh)
        if ap is not None:
            out[c] = ap
    return out


def mean_average_precision(dets, gts, class_set: Iterable[int], iou_thresh: float = 0.5) -> float:
    """Unweighted mean AP over the classes in ``class_set`` that have ground truth."""
    class_set = list(class_set)
    if not class_set:
        raise InputDataError("mAP needs a non-empty class set")
    aps = per_class_ap(dets, gts, class_set, iou_thresh)
    if not aps:
        raise InputDataError(f"no ground truth for any of classes {class_set}")
    return float(np.mean(list(aps.values())))


def recall_at_k(dets, gts, k: int = 100, iou_thresh: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched by the top-``k`` detections of their image."""
    if k < 1:
        raise ConfigError(f"k={k} must be at least 1")
    if not gts:
        raise InputDataError("recall needs at least one ground-truth box")
    by_image = defaultdict(list)
    for d in dets:
        by_image[d.image_id].append(d)
    kept = []
    for image_dets in by_image.values():
        kept.extend(_ranked(image_dets)[:k])
    ranked = _ranked(kept)
    return float(_hits(ranked, gts, iou_thresh).sum() / len(gts))


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen < 0 or unseen < 0:
        raise InputDataError(f"harmonic mean inputs must be non-negative, got {seen}, {unseen}")
    total = seen + unseen
    return 0.0 if total == 0 else 2.0 * seen * unseen / total


def classification_accuracy(classifier, features) -> float:
    """Fraction of feature records whose predicted class equals their label."""
    if len(features) == 0:
        raise InputDataError("no feature records to classify")
    extra = set(np.unique(features.class_ids).tolist()) - set(classifier.class_ids)
    if extra:
        raise InputDataError(f"features carry classes {sorted(extra)} the classifier does not know")
    return float(np.mean(classifier.predict(features.features) == features.class_ids))


def silhouette(features) -> float:
    """Mean silhouette coefficient of the labeled features (Euclidean)."""
    labels, codes = np.unique(features.class_ids, return_inverse=True)
    if labels.size < 2:
        raise InputDataError("silhouette needs at least two classes")
    return float(np.mean(_kernels.silhouette_samples(features.features, codes)))


@dataclass
class MetricTriple:
    seen: float
    unseen: float
    hm: float

    @classmethod
    def of(cls, seen: float, unseen: float) -> "MetricTriple":
        return cls(seen, unseen, harmonic_mean(seen, unseen))


@dataclass
class EvalReport:
    iou_threshold: float
    k: int
    zsd_map: float | None = None
    zsd_recall: float | None = None
    gzsd_map: MetricTriple | None = None
    gzsd_recall: MetricTriple | None = None
    per_class_ap: dict = field(default_factory=dict)
    unseen_accuracy: float | None = None
    silhouette: float | None = None
    interpolation: str = INTERPOLATION

    def to_dict(self) -> dict:
        def triple(t):
            return None if t is None else {"seen": t.seen, "unseen": t.unseen, "hm": t.hm}

        return {
            "iou_threshold": self.iou_threshold,
            "k": self.k,
            "interpolation": self.interpolation,
            "zsd": {"map": self.zsd_map, f"recall@{self.k}": self.zsd_recall},
            "gzsd": {"map": triple(self.gzsd_map), f"recall@{self.k}": triple(self.gzsd_recall)},
            "per_class_ap": {str(c): v for c, v in sorted(self.per_class_ap.items())},
            "unseen_accuracy": self.unseen_accuracy,
            "silhouette": self.silhouette,
        }


def evaluate_gzsd(
    dets,
    gts,
    seen_ids: Sequence[int],
    unseen_ids: Sequence[int],
    iou_thresh: float = 0.5,
    k: int = 100,
) -> tuple:
    """Seen/unseen/HM triples for mAP and Recall@k from one detection run, plus per-class AP."""
    seen_ids, unseen_ids = set(seen_ids), set(unseen_ids)
    if seen_ids & unseen_ids:
        raise InputDataError("seen and unseen class sets overlap")

    def part(ids):
        return [d for d in dets if d.class_id in ids], [g for g in gts if g.class_id in ids]

    (ds, gs), (du, gu) = part(seen_ids), part(unseen_ids)
    maps = MetricTriple.of(
        mean_average_precision(ds, gs, sorted(seen_ids), iou_thresh),
        mean_average_precision(du, gu, sorted(unseen_ids), iou_thresh),
    )
    recalls = MetricTriple.of(recall_at_k(ds, gs, k, iou_thresh), recall_at_k(du, gu, k, iou_thresh))
    aps = per_class_ap(dets, gts, sorted(seen_ids | unseen_ids), iou_thresh)
    return maps, recalls, aps
