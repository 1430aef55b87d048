"""Targets, detection loss, SGD training loop and inference decoding."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from . import core
from .detector import HEAD_STRIDE, Detector
from .metrics import Detection, GroundTruth, evaluate

LOG_WH_LIMIT = 8.0


def assign_targets(gt_boxes, grid: tuple[int, int], stride: int = HEAD_STRIDE):
    """Objectness (H, W) and box (H, W, 4) targets for one image.

    Each box goes to the cell holding its centre; when two centres share a
    cell the larger box wins.
    """
    H, W = grid
    obj = np.zeros((H, W))
    tgt = np.zeros((H, W, 4))
    area = np.full((H, W), -1.0)
    for b in gt_boxes:
        cx, cy = bx.centers(b)
        j = min(max(int(cx // stride), 0), W - 1)
        i = min(max(int(cy // stride), 0), H - 1)
        a = float(bx.areas(b))
        if a > area[i, j]:
            area[i, j] = a
            obj[i, j] = 1.0
            tgt[i, j] = b
    return obj, tgt


def decode_boxes(head, stride: int = HEAD_STRIDE):
    """(B, 5, H, W) head -> (B, H, W, 4) corner boxes in image pixels.

    Centre = (cell + sigmoid(t_xy)) * stride, size = exp(t_wh) * stride.
    """
    B, _, H, W = head.shape
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cx = (jj + core.sigmoid(head[:, 1])) * stride
    cy = (ii + core.sigmoid(head[:, 2])) * stride
    w = np.exp(np.clip(head[:, 3], -LOG_WH_LIMIT, LOG_WH_LIMIT)) * stride
    h = np.exp(np.clip(head[:, 4], -LOG_WH_LIMIT, LOG_WH_LIMIT)) * stride
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _decode_jacobian(head, stride):
    """d(x0, y0, x1, y1)/d(tx, ty, tw, th) pieces per cell."""
    sx = core.sigmoid(head[:, 1])
    sy = core.sigmoid(head[:, 2])
    dcx = stride * sx * (1 - sx)
    dcy = stride * sy * (1 - sy)
    tw, th = head[:, 3], head[:, 4]
    w = np.exp(np.clip(tw, -LOG_WH_LIMIT, LOG_WH_LIMIT)) * stride
    h = np.exp(np.clip(th, -LOG_WH_LIMIT, LOG_WH_LIMIT)) * stride
    dw = w * (np.abs(tw) < LOG_WH_LIMIT)
    dh = h * (np.abs(th) < LOG_WH_LIMIT)
    return dcx, dcy, dw, dh


@dataclass
class LossParts:
    total: float
    objectness: float
    regression: float


def detection_loss(head, obj_t, box_t, reg_cfg: bx.RegLossConfig, stride: int = HEAD_STRIDE):
    """Mean BCE objectness over all cells plus the mean regression loss over
    positives, multiplied by the batch size (the YOLOv5 convention, which keeps
    the step size independent of batch size under plain SGD).

    Returns ``(LossParts, dhead)``.
    """
    B, _, H, W = head.shape
    z = head[:, 0]
    n_cells = z.size
    bce = np.maximum(z, 0) - z * obj_t + np.log1p(np.exp(-np.abs(z)))
    l_obj = bce.sum() / n_cells
    dhead = np.zeros_like(head)
    dhead[:, 0] = (core.sigmoid(z) - obj_t) / n_cells

    pos = obj_t > 0
    n_pos = int(pos.sum())
    l_reg = 0.0
    if n_pos:
        pred = decode_boxes(head, stride)
        p, g = pred[pos], box_t[pos]
        l_reg = float(np.sum(bx.regression_loss(p, g, reg_cfg))) / n_pos
        dbox = bx.regression_loss_grad(p, g, reg_cfg) / n_pos  # (n_pos, 4)
        dcx, dcy, dw, dh = (a[pos] for a in _decode_jacobian(head, stride))
        gx = (dbox[:, 0] + dbox[:, 2]) * dcx
        gy = (dbox[:, 1] + dbox[:, 3]) * dcy
        gw = (dbox[:, 2] - dbox[:, 0]) * dw / 2
        gh = (dbox[:, 3] - dbox[:, 1]) * dh / 2
        for ch, g_ in zip((1, 2, 3, 4), (gx, gy, gw, gh)):
            plane = dhead[:, ch]
            plane[pos] = g_
    return LossParts(float(B * (l_obj + l_reg)), float(B * l_obj), float(B * l_reg)), dhead * B


def reg_config(model: Detector, C: float) -> bx.RegLossConfig:
    cfg = model.cfg
    a1 = cfg.alpha1 if cfg.loss == "iou_plus_center" else 0.0
    return bx.RegLossConfig(alpha1=a1, alpha2=cfg.alpha2, C=C)


def batch_targets(batch_boxes, grid):
    objs, tgts = zip(*(assign_targets(b, grid) for b in batch_boxes))
    return np.stack(objs), np.stack(tgts)


# ---------------------------------------------------------------------------
# inference


def nms(boxes, scores, iou_threshold: float):
    """Greedy non-maximum suppression; returns kept indices, best first."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        if len(order) == 1:
            break
        ious = np.asarray(bx.iou(boxes[i][None], boxes[order[1:]]))
        order = order[1:][ious <= iou_threshold]
    return keep


def detections_from_head(head, image_ids=None, score_threshold=0.05, nms_iou=0.5,
                         stride: int = HEAD_STRIDE):
    B = head.shape[0]
    image_ids = list(range(B)) if image_ids is None else list(image_ids)
    scores = core.sigmoid(head[:, 0])
    boxes = decode_boxes(head, stride)
    out = []
    for b in range(B):
        sel = scores[b] >= score_threshold
        bb, ss = boxes[b][sel], scores[b][sel]
        for k in nms(bb, ss, nms_iou):
            out.append(Detection(tuple(float(v) for v in bb[k]), float(ss[k]), 0, image_ids[b]))
    return out


def predict_and_decode(model: Detector, images, score_threshold=0.05, nms_iou=0.5,
                       image_ids=None, batch_size: int = 32):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    ids = list(range(len(images))) if image_ids is None else list(image_ids)
    dets = []
    for s in range(0, len(images), batch_size):
        head, _ = model.forward(images[s:s + batch_size], mode="infer")
        dets += detections_from_head(head, ids[s:s + batch_size], score_threshold, nms_iou)
    return dets


def ground_truths(dataset, start_id: int = 0):
    return [GroundTruth(tuple(b), 0, start_id + i) for i, (_, boxes) in enumerate(dataset)
            for b in boxes]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # {"step", "total", "objectness", "regression"}
    epochs: list = field(default_factory=list)  # {"epoch", "step", "ap50_iou", "ap50_safit"}
    C: float = 0.0
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d

    def totals(self) -> np.ndarray:
        return np.array([s["total"] for s in self.steps])

    def smoothed(self, beta: float = 0.9) -> np.ndarray:
        """Bias-corrected exponential moving average of the total loss."""
        out, avg = [], 0.0
        for t, v in enumerate(self.totals(), 1):
            avg = beta * avg + (1 - beta) * v
            out.append(avg / (1 - beta**t))
        return np.array(out)


def constant_lr(lr):
    return lambda step, total: lr


def cosine_lr(lr, final_frac: float = 0.1):
    return lambda step, total: lr * (final_frac + (1 - final_frac) * 0.5 *
                                     (1 + np.cos(np.pi * step / max(total, 1))))


def train(model: Detector, dataset, steps: int | None = None, epochs: int | None = None,
          lr=0.01, weight_decay: float = 5e-4, batch_size: int = 8, seed: int = 0,
          val=None, shuffle: bool = True, log=None) -> TrainHistory:
    """Plain SGD on objectness BCE + regression loss; deterministic under ``seed``.

    ``dataset`` is a list of ``(image (C,H,W), boxes)``. ``lr`` is a float or
    a ``(step, total) -> lr`` schedule. AP50 on ``val`` (if given) is logged
    after every epoch under both matching protocols.
    """
    t0 = time.perf_counter()
    schedule = lr if callable(lr) else constant_lr(lr)
    n = len(dataset)
    per_epoch = max(1, -(-n // batch_size))
    if steps is None:
        steps = (epochs or 1) * per_epoch
    all_boxes = [b for _, bs in dataset for b in bs]
    C = model.cfg.C or (bx.mean_object_size(all_boxes) if all_boxes else 8.0)
    rcfg = reg_config(model, C)
    grid = (model.cfg.image_size // HEAD_STRIDE,) * 2
    rng = np.random.default_rng(seed)
    images = np.stack([im for im, _ in dataset])
    hist = TrainHistory(C=C)

    step, epoch = 0, 0
    while step < steps:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for s in range(0, n, batch_size):
            if step >= steps:
                break
            idx = order[s:s + batch_size]
            obj_t, box_t = batch_targets([dataset[i][1] for i in idx], grid)
            head, cache = model.forward(images[idx], mode="train")
            parts, dhead = detection_loss(head, obj_t, box_t, rcfg)
            if not np.isfinite(parts.total):
                raise FloatingPointError(f"non-finite loss at step {step}")
            grads = model.backward(dhead, cache)
            core.sgd_step(model.params, grads, schedule(step, steps), weight_decay)
            hist.steps.append({"step": step, **asdict(parts)})
            step += 1
        epoch += 1
        if val is not None:
            hist.epochs.append({"epoch": epoch, "step": step, **toy_ap50(model, val)})
        if log:
            log(f"epoch {epoch} step {step} loss {hist.steps[-1]['total']:.4f}")
    hist.wall_clock = time.perf_counter() - t0
    return hist


def toy_ap50(model: Detector, dataset, C: float | None = None) -> dict:
    ims = np.stack([im for im, _ in dataset])
    dets = predict_and_decode(model, ims)
    gts = ground_truths(dataset)
    rep = evaluate(dets, gts, C=C or model.cfg.C or "auto", thresholds=[0.5])
    return {"ap50_iou": rep["iou"].AP50, "ap50_safit": rep["safit"].AP50}


def mean_center_error(model: Detector, dataset) -> float:
    """Mean distance between each GT centre and the box predicted at its assigned cell."""
    ims = np.stack([im for im, _ in dataset])
    head, _ = model.forward(ims, mode="infer")
    pred = decode_boxes(head)
    grid = head.shape[2:]
    errs = []
    for b, (_, boxes) in enumerate(dataset):
        obj, tgt = assign_targets(boxes, grid)
        pos = obj > 0
        errs.extend(bx.center_distance(pred[b][pos], tgt[pos]).tolist())
    return float(np.mean(errs))
