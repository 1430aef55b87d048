"""Command-line harness: ``gen-data``, ``train-toy``, ``eval``, ``gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("tinydet")


def _range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("..")
    return int(lo), int(hi or lo)


def cmd_gen_data(args) -> int:
    from .io import save_dataset
    from .scenes import SceneConfig, make_dataset

    cfg = SceneConfig(size=args.size, objects=args.objects, min_size=args.min_size,
                      max_size=args.max_size, clutter=args.clutter, seed=args.seed)
    path = save_dataset(args.out, make_dataset(args.images, cfg))
    log.info("wrote %d images and %s", args.images, path)
    return 0


def cmd_train_toy(args) -> int:
    import numpy as np

    from .detector import Detector, DetectorConfig
    from .io import load_dataset, save_weights
    from .metrics import detections_json, ground_truth_json
    from .scenes import SceneConfig, make_dataset
    from .training import ground_truths, predict_and_decode, train

    cfg = DetectorConfig()
    if args.config:
        cfg = DetectorConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.data:
        data = load_dataset(args.data)
    else:
        size = cfg.image_size
        scenes = SceneConfig(size=size, seed=args.seed, max_size=min(8, (size - 1) // 4))
        data = make_dataset(args.images, scenes)
    n_val = max(1, int(round(len(data) * args.val_fraction)))
    train_set, val_set = data[:-n_val], data[-n_val:]

    model = Detector.build(cfg, args.seed)
    steps = None if args.epochs else args.steps
    hist = train(model, train_set, steps=steps, epochs=args.epochs, lr=args.lr,
                 weight_decay=args.weight_decay, batch_size=args.batch_size, seed=args.seed,
                 val=val_set, log=log.info)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.json").write_text(json.dumps(hist.to_dict(), indent=1))
    save_weights(out, model)
    dets = predict_and_decode(model, np.stack([im for im, _ in val_set]))
    (out / "val_dets.json").write_text(json.dumps(detections_json(dets)))
    images = [{"id": i, "width": im.shape[2], "height": im.shape[1]}
              for i, (im, _) in enumerate(val_set)]
    (out / "val_gt.json").write_text(json.dumps(ground_truth_json(
        ground_truths(val_set), images, [{"id": 0, "name": "target"}])))
    s = hist.smoothed()
    log.info("steps %d  smoothed loss %.4f -> %.4f  (%.1fs)", len(s), s[min(9, len(s) - 1)],
             s[-1], hist.wall_clock)
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate, load_detections, load_ground_truth

    C = "auto" if args.C == "auto" else float(args.C)
    rep = evaluate(load_detections(args.dets), load_ground_truth(args.gt), args.protocol, C)
    json.dump(rep.to_dict(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run

    rep = run(args.module, args.seed)
    json.dump(rep.to_dict(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinydet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic tiny-object dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", type=_range, default=(1, 3), help="count range, e.g. 1..3")
    g.add_argument("--min-size", type=int, default=3)
    g.add_argument("--max-size", type=int, default=8)
    g.add_argument("--clutter", type=float, default=0.15)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-toy", help="train the toy detector")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    t.add_argument("--config", help="JSON file with DetectorConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="train whole epochs instead of --steps")
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--images", type=int, default=200, help="scenes to generate without --data")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--dets", required=True)
    e.add_argument("--protocol", choices=("iou", "safit", "both"), default="both")
    e.add_argument("--C", default="auto", help="SAFit/NWD size constant, or 'auto'")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    c.add_argument("--module", default="all",
                   choices=("all", "core", "rhwd", "grm", "csha", "losses", "detector"))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
