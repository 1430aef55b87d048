"""Synthetic tiny-object scenes on cluttered backgrounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ConfigError

BACKGROUND = 0.5


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    objects: tuple[int, int] = (1, 3)
    min_size: int = 3
    max_size: int = 8
    clutter: float = 0.15
    contrast: tuple[float, float] = (0.3, 0.5)
    channels: int = 3
    seed: int = 0
    # when set, object centres fall in this (lo, hi) band of their grid cell
    cell_band: tuple[float, float] | None = None
    cell: int = 16

    def __post_init__(self):
        if self.size % 32:
            raise ConfigError(f"image size {self.size} must be divisible by 32")
        if not 1 <= self.min_size <= self.max_size < self.size / 4:
            raise ConfigError("object sizes must satisfy 1 <= min <= max < size/4")
        if not 0 <= self.objects[0] <= self.objects[1]:
            raise ConfigError(f"bad object count range {self.objects}")


def _clutter(rng, cfg: SceneConfig):
    if cfg.clutter == 0:
        return np.full((cfg.channels, cfg.size, cfg.size), BACKGROUND)
    shared = gaussian_filter(rng.standard_normal((cfg.size, cfg.size)), 2.0, mode="wrap")
    per_ch = gaussian_filter(rng.standard_normal((cfg.channels, cfg.size, cfg.size)),
                             (0, 1.0, 1.0), mode="wrap")
    noise = shared[None] + 0.3 * per_ch
    noise /= np.abs(noise).max()
    return BACKGROUND + cfg.clutter * noise


def _place(rng, cfg: SceneConfig, w, h):
    S = cfg.size
    if cfg.cell_band is None:
        return int(rng.integers(0, S - w + 1)), int(rng.integers(0, S - h + 1))
    lo, hi = cfg.cell_band
    n_cells = S // cfg.cell
    while True:
        cx = rng.integers(n_cells) * cfg.cell + rng.uniform(lo, hi)
        cy = rng.integers(n_cells) * cfg.cell + rng.uniform(lo, hi)
        x0, y0 = int(np.floor(cx - w / 2)), int(np.floor(cy - h / 2))
        if 0 <= x0 <= S - w and 0 <= y0 <= S - h:
            return x0, y0


def _mask(rng, w, h):
    if rng.random() < 0.5:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0


def _in_band(box, cfg: SceneConfig):
    if cfg.cell_band is None:
        return True
    lo, hi = cfg.cell_band
    cx = (box[0] + box[2]) / 2 % cfg.cell
    cy = (box[1] + box[3]) / 2 % cfg.cell
    return lo <= cx <= hi and lo <= cy <= hi


def gen_scene(rng: np.random.Generator, cfg: SceneConfig):
    """One (image, boxes) pair.

    ``image`` is (channels, size, size) in [0, 1]; ``boxes`` is a list of
    tight ``(x_min, y_min, x_max, y_max)`` pixel boxes. Objects are
    rectangles or ellipses painted at a fixed offset from the background
    level, with a little per-channel jitter; they never touch each other.
    """
    img = _clutter(rng, cfg)
    n = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    boxes: list[tuple] = []
    occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
    tries = 0
    while len(boxes) < n and tries < 200:
        tries += 1
        w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        x0, y0 = _place(rng, cfg, w, h)
        if occupied[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1].any():
            continue
        m = _mask(rng, w, h)
        ys, xs = np.nonzero(m)
        box = (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
        if min(box[2] - box[0], box[3] - box[1]) < cfg.min_size or not _in_band(box, cfg):
            continue
        sign = rng.choice((-1.0, 1.0))
        level = BACKGROUND + sign * rng.uniform(*cfg.contrast)
        color = level + 0.05 * rng.uniform(-1, 1, size=cfg.channels)
        patch = img[:, y0:y0 + h, x0:x0 + w]
        patch[:, m] = color[:, None]
        occupied[y0:y0 + h, x0:x0 + w] = True
        boxes.append(tuple(float(v) for v in box))
    return np.clip(img, 0.0, 1.0), boxes


def make_dataset(n: int, cfg: SceneConfig):
    """``n`` scenes, each from its own child seed of ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    return [gen_scene(np.random.default_rng(s), cfg) for s in seeds]


# ---------------------------------------------------------------------------
# portable any-map files


def write_pnm(path, image) -> None:
    """(C, H, W) float image in [0, 1] -> binary PGM (C=1) or PPM (C=3)."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise ConfigError(f"PNM holds 1 or 3 channels, got {c}")
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    c = {"P5": 1, "P6": 3}.get(magic)
    if c is None or maxval != 255:
        raise ConfigError(f"unsupported PNM variant {magic} / maxval {maxval}")
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return arr.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0
