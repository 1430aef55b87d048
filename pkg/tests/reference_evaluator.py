"""Stand-alone reference evaluator used to freeze and cross-check golden reports.

Pure Python with no imports from the package: boxes, similarities, matching
and 101-point AP are written out again from their definitions, with loops
instead of array operations.
"""

import json
import math
import sys


def to_corners(bbox):
    x, y, w, h = bbox
    return (x, y, x + w, y + h)


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def box_nwd(a, b, C):
    cxa, cya = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    cxb, cyb = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    wa, ha = a[2] - a[0], a[3] - a[1]
    wb, hb = b[2] - b[0], b[3] - b[1]
    w2 = (cxa - cxb) ** 2 + (cya - cyb) ** 2 + ((wa - wb) / 2) ** 2 + ((ha - hb) / 2) ** 2
    return math.exp(-math.sqrt(w2) / C)


def box_safit(det, gt, C):
    area = (gt[2] - gt[0]) * (gt[3] - gt[1])
    w = 1.0 / (1.0 + math.exp(-(math.sqrt(area) / C - 1.0)))
    return w * box_iou(det, gt) + (1 - w) * box_nwd(det, gt, C)


def interpolated_ap(flags, n_gt):
    if n_gt == 0:
        return 0.0
    tp = fp = 0
    recall, precision = [], []
    for f in flags:
        tp += f
        fp += not f
        recall.append(tp / n_gt)
        precision.append(tp / (tp + fp))
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for rc, pr in zip(recall, precision):
            if rc >= r and pr > best:
                best = pr
        total += best
    return total / 101


def class_ap(dets, gts, sim, threshold):
    """dets: [(image, score, order, box)], gts: [(image, box)]."""
    dets = sorted(dets, key=lambda d: (-d[1], d[2]))
    used = set()
    flags = []
    for image, _, _, box in dets:
        best, best_j = -1.0, None
        for j, (gimage, gbox) in enumerate(gts):
            if gimage != image or j in used:
                continue
            s = sim(box, gbox)
            if s >= threshold and s > best:
                best, best_j = s, j
        if best_j is None:
            flags.append(False)
        else:
            used.add(best_j)
            flags.append(True)
    return interpolated_ap(flags, len(gts))


def evaluate(gt_json, det_json, C=None):
    gts = [(a["image_id"], a["category_id"], to_corners(a["bbox"])) for a in gt_json["annotations"]]
    dets = [(d["image_id"], d["category_id"], d["score"], i, to_corners(d["bbox"]))
            for i, d in enumerate(det_json)]
    if C is None:
        C = sum(math.sqrt((b[2] - b[0]) * (b[3] - b[1])) for _, _, b in gts) / len(gts)
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    sims = {"iou": box_iou, "safit": lambda d, g: box_safit(d, g, C)}
    report = {"num_gt": len(gts), "num_dets": len(dets), "C": C}
    classes = sorted({c for _, c, _ in gts})
    for name, sim in sims.items():
        per = {}
        for c in classes:
            cd = [(im, s, o, b) for im, cc, s, o, b in dets if cc == c]
            cg = [(im, b) for im, cc, b in gts if cc == c]
            aps = [class_ap(cd, cg, sim, t) for t in thresholds]
            per[str(c)] = {"AP": sum(aps) / len(aps), "AP50": class_ap(cd, cg, sim, 0.5),
                           "AP75": class_ap(cd, cg, sim, 0.75)}
        report[name] = {k: sum(p[k] for p in per.values()) / len(per) for k in ("AP", "AP50", "AP75")}
        report[name]["per_class"] = per
    return report


if __name__ == "__main__":
    with open(sys.argv[1]) as f:
        gt = json.load(f)
    with open(sys.argv[2]) as f:
        dt = json.load(f)
    json.dump(evaluate(gt, dt), sys.stdout, indent=1)
