"""On-disk formats: toy datasets (PNM images + gt.json) and flat weight files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ConfigError
from .detector import Detector, DetectorConfig
from .metrics import GroundTruth, ground_truth_json, load_ground_truth
from .scenes import read_pnm, write_pnm

CATEGORIES = [{"id": 0, "name": "target"}]


def save_dataset(out_dir, dataset) -> Path:
    """Write ``images/NNNNNN.ppm`` (or ``.pgm``) plus ``gt.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, gts = [], []
    for i, (img, boxes) in enumerate(dataset):
        ext = "ppm" if img.shape[0] == 3 else "pgm"
        name = f"images/{i:06d}.{ext}"
        write_pnm(out / name, img)
        images.append({"id": i, "width": img.shape[2], "height": img.shape[1], "file_name": name})
        gts.extend(GroundTruth(tuple(b), 0, i) for b in boxes)
    path = out / "gt.json"
    path.write_text(json.dumps(ground_truth_json(gts, images, CATEGORIES), indent=1))
    return path


def load_dataset(data_dir):
    """Inverse of :func:`save_dataset`; images come back quantised to 8 bits."""
    root = Path(data_dir)
    meta = json.loads((root / "gt.json").read_text())
    by_image: dict[int, list] = {im["id"]: [] for im in meta["images"]}
    for g in load_ground_truth(meta):
        by_image[g.image_id].append(g.box)
    out = []
    for im in meta["images"]:
        fname = im.get("file_name", f"images/{im['id']:06d}.ppm")
        out.append((read_pnm(root / fname), by_image[im["id"]]))
    return out


def save_weights(out_dir, model: Detector) -> tuple[Path, Path]:
    """Little-endian float64 blob ``weights.bin`` plus ``weights.manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    named = list(model.params.items())
    for layer, st in model.state.items():
        named += [(f"state.{layer}.{k}", v) for k, v in st.items()]
    for name, arr in named:
        a = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    (out / "weights.bin").write_bytes(b"".join(chunks))
    manifest = {"dtype": "<f8", "count": offset, "tensors": tensors,
                "config": model.cfg.to_dict()}
    (out / "weights.manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "weights.bin", out / "weights.manifest.json"


def load_weights(out_dir) -> Detector:
    out = Path(out_dir)
    manifest = json.loads((out / "weights.manifest.json").read_text())
    flat = np.frombuffer((out / "weights.bin").read_bytes(), dtype=manifest["dtype"])
    if flat.size != manifest["count"]:
        raise ConfigError(f"weights.bin holds {flat.size} values, manifest says {manifest['count']}")
    model = Detector.build(DetectorConfig.from_dict(manifest["config"]))
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=int))
        arr = flat[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float64)
        name = t["name"]
        if name.startswith("state."):
            layer, key = name[len("state."):].rsplit(".", 1)
            model.state[layer][key] = arr
        else:
            model.params[name] = arr
    return model
