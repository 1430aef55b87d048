"""COCO-style detection evaluation under IoU and SAFit similarity.

SAFit blends IoU with the normalised Gaussian Wasserstein distance (NWD),
leaning on NWD for ground truths smaller than the size constant ``C``::

    w     = sigmoid(sqrt(A_gt) / C - 1)
    SAFit = w * IoU + (1 - w) * NWD

Matching is greedy per (image, class): detections in descending score order
each claim the unmatched ground truth of highest similarity at or above the
threshold. AP is the 101-point interpolated area under the precision/recall
curve; the headline AP averages thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import as_boxes, areas, iou, mean_object_size, xywh_to_xyxy
from .core import ConfigError

THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.arange(101) / 100  # exact i/100, so recall k/n == r compares equal
PROTOCOLS = ("iou", "safit")


@dataclass
class Detection:
    box: tuple
    score: float
    class_id: int = 0
    image_id: int = 0


@dataclass
class GroundTruth:
    box: tuple
    class_id: int = 0
    image_id: int = 0


def wasserstein2(a, b):
    """Squared 2-Wasserstein distance between the Gaussians N(centre, diag((w/2)^2, (h/2)^2))."""
    a, b = as_boxes(a), as_boxes(b)
    ca = (a[..., :2] + a[..., 2:]) / 2
    cb = (b[..., :2] + b[..., 2:]) / 2
    sa = (a[..., 2:] - a[..., :2]) / 2
    sb = (b[..., 2:] - b[..., :2]) / 2
    return ((ca - cb) ** 2).sum(-1) + ((sa - sb) ** 2).sum(-1)


def nwd(a, b, C: float):
    """``exp(-sqrt(W2) / C)``, in (0, 1]."""
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    out = np.exp(-np.sqrt(wasserstein2(a, b)) / C)
    return out if np.ndim(out) else float(out)


def safit_weight(gt_area, C: float):
    return 1.0 / (1.0 + np.exp(-(np.sqrt(gt_area) / C - 1.0)))


def safit(a, b, C: float, A=None):
    """Scale-adaptive fitness of ``a`` against ground truth ``b``.

    ``A`` defaults to the area of ``b``.
    """
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    if A is None:
        A = areas(b)
    w = safit_weight(A, C)
    out = w * iou(a, b) + (1.0 - w) * nwd(a, b, C)
    return out if np.ndim(out) else float(out)


def similarity_matrix(dets, gts, protocol: str, C: float | None = None):
    """(n_det, n_gt) similarities between corner-form box arrays."""
    d = as_boxes(dets).reshape(-1, 1, 4)
    g = as_boxes(gts).reshape(1, -1, 4)
    if protocol == "iou":
        return np.asarray(iou(d, g)).reshape(d.shape[0], g.shape[1])
    if protocol == "safit":
        if C is None:
            raise ConfigError("the SAFit protocol needs a size constant C")
        return np.asarray(safit(d, g, C)).reshape(d.shape[0], g.shape[1])
    raise ConfigError(f"unknown protocol {protocol!r}")


def greedy_match(sim: np.ndarray, threshold: float):
    """Match rows (detections already in score order) to columns (ground truths).

    Returns ``(det_matches, gt_matched)`` where ``det_matches[i]`` is the
    claimed GT index or -1.
    """
    if not 0 < threshold <= 1:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    n_det, n_gt = sim.shape
    det_matches = np.full(n_det, -1, dtype=int)
    taken = np.zeros(n_gt, dtype=bool)
    for i in range(n_det):
        best, best_j = -np.inf, -1
        for j in range(n_gt):
            # strict '>' keeps the lower index on ties
            if not taken[j] and sim[i, j] >= threshold and sim[i, j] > best:
                best, best_j = sim[i, j], j
        if best_j >= 0:
            det_matches[i] = best_j
            taken[best_j] = True
    return det_matches, taken


def _score_order(scores):
    # stable sort keeps insertion order among equal scores
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def match_detections(dets: list[Detection], gts: list[GroundTruth], similarity: str = "iou",
                     threshold: float = 0.5, C: float | None = None):
    """TP flags per detection (input order) and matched flags per ground truth."""
    if not 0 < threshold <= 1:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    tp = np.zeros(len(dets), dtype=bool)
    gt_hit = np.zeros(len(gts), dtype=bool)
    groups_d, groups_g = defaultdict(list), defaultdict(list)
    for i, d in enumerate(dets):
        groups_d[(d.image_id, d.class_id)].append(i)
    for j, g in enumerate(gts):
        groups_g[(g.image_id, g.class_id)].append(j)
    for key, di in groups_d.items():
        gj = groups_g.get(key, [])
        if not gj:
            continue
        di = np.asarray(di)[_score_order([dets[i].score for i in di])]
        sim = similarity_matrix([dets[i].box for i in di], [gts[j].box for j in gj], similarity, C)
        m, _ = greedy_match(sim, threshold)
        for row, col in enumerate(m):
            if col >= 0:
                tp[di[row]] = True
                gt_hit[gj[col]] = True
    return tp, gt_hit


def average_precision(tp_flags, num_gt: int, scores=None) -> float:
    """101-point interpolated AP.

    ``tp_flags`` are ordered by descending score unless ``scores`` is given,
    in which case they are sorted here (stable on ties).
    """
    tp = np.asarray(tp_flags, dtype=bool)
    if scores is not None:
        tp = tp[_score_order(scores)]
    if num_gt <= 0 or not tp.any():
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # running max from the right gives max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


@dataclass
class ProtocolReport:
    per_class: dict = field(default_factory=dict)  # class_id -> {"AP", "AP50", "AP75"}
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0

    def to_dict(self):
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


@dataclass
class EvalReport:
    protocols: dict = field(default_factory=dict)  # name -> ProtocolReport
    num_gt: int = 0
    num_dets: int = 0
    C: float | None = None

    def __getitem__(self, protocol) -> ProtocolReport:
        return self.protocols[protocol]

    def to_dict(self):
        return {"num_gt": self.num_gt, "num_dets": self.num_dets, "C": self.C,
                **{k: v.to_dict() for k, v in self.protocols.items()}}


def _protocol_report(dets, gts, protocol, C, thresholds):
    classes = sorted({g.class_id for g in gts})
    rep = ProtocolReport()
    for cls in classes:
        cd = [d for d in dets if d.class_id == cls]
        cg = [g for g in gts if g.class_id == cls]
        scores = [d.score for d in cd]
        aps = {}
        for t in sorted({round(float(t), 6) for t in thresholds} | {0.5, 0.75}):
            tp, _ = match_detections(cd, cg, protocol, t, C)
            aps[t] = average_precision(tp, len(cg), scores)
        rep.per_class[cls] = {"AP": float(np.mean([aps[round(float(t), 6)] for t in thresholds])),
                              "AP50": aps[0.5], "AP75": aps[0.75]}
    if classes:
        for key in ("AP", "AP50", "AP75"):
            setattr(rep, key, float(np.mean([rep.per_class[c][key] for c in classes])))
    return rep


def evaluate(dets: list[Detection], gts: list[GroundTruth], protocols=PROTOCOLS,
             C: float | str | None = "auto", thresholds=THRESHOLDS) -> EvalReport:
    """AP / AP50 / AP75 per class and averaged, under each requested protocol.

    ``C="auto"`` derives the size constant from the ground truths as the mean
    of ``sqrt(w*h)``.
    """
    protocols = PROTOCOLS if protocols == "both" else ((protocols,) if isinstance(protocols, str)
                                                       else tuple(protocols))
    if C == "auto" or C is None:
        C = mean_object_size([g.box for g in gts]) if gts else None
    thresholds = np.asarray(thresholds, dtype=float).reshape(-1)
    report = EvalReport(num_gt=len(gts), num_dets=len(dets), C=C)
    for proto in protocols:
        if proto == "safit" and C is None:
            report.protocols[proto] = ProtocolReport()
            continue
        report.protocols[proto] = _protocol_report(dets, gts, proto, C, thresholds)
    return report


# ---------------------------------------------------------------------------
# COCO-flavoured JSON


def load_ground_truth(path_or_dict) -> list[GroundTruth]:
    data = _load(path_or_dict)
    out = []
    for ann in data["annotations"]:
        out.append(GroundTruth(tuple(xywh_to_xyxy(ann["bbox"]).tolist()), int(ann["category_id"]),
                               int(ann["image_id"])))
    return out


def load_detections(path_or_list) -> list[Detection]:
    data = _load(path_or_list)
    return [Detection(tuple(xywh_to_xyxy(d["bbox"]).tolist()), float(d["score"]),
                      int(d["category_id"]), int(d["image_id"])) for d in data]


def ground_truth_json(gts: list[GroundTruth], images: list[dict], categories: list[dict]) -> dict:
    anns = []
    for i, g in enumerate(gts):
        x0, y0, x1, y1 = g.box
        anns.append({"id": i + 1, "image_id": g.image_id, "category_id": g.class_id,
                     "bbox": [x0, y0, x1 - x0, y1 - y0]})
    return {"images": images, "annotations": anns, "categories": categories}


def detections_json(dets: list[Detection]) -> list[dict]:
    out = []
    for d in dets:
        x0, y0, x1, y1 = d.box
        out.append({"image_id": d.image_id, "category_id": d.class_id,
                    "bbox": [x0, y0, x1 - x0, y1 - y0], "score": d.score})
    return out


def _load(src):
    if isinstance(src, (str, Path)):
        return json.loads(Path(src).read_text())
    return src
