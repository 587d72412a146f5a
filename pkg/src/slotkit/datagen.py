"""Deterministic synthetic episodes: flat-shaded sprites over simple
backgrounds, with exact per-pixel instance masks.

Objects are placed without initial overlap, move with constant velocity
and wall reflection, and occlude each other in index order (later on top).
Frames are uint8 (T, H, W, 3); masks are uint8 (T, H, W) with 0 =
background and 1..n stable per object across frames. (cfg, seed) fully
determines the bytes on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import sdt
from .rng import Rng

SHAPES = ("square", "circle", "triangle")
BACKGROUNDS = ("flat", "checker", "noise")

# 8 saturated sprite colors, all far from the background grays
PALETTE = np.array([
    (230, 25, 25), (25, 115, 230), (25, 185, 55), (240, 190, 20),
    (160, 40, 200), (245, 130, 30), (30, 200, 200), (235, 70, 160),
], dtype=np.uint8)


class GenerationError(RuntimeError):
    """Placement failed after bounded retries."""


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 5
    shapes: tuple = SHAPES
    palette_size: int = 8
    background: str = "checker"
    t_ep: int = 6
    vel_min: float = 0.0
    vel_max: float = 2.0

    def validate(self):
        if self.size < 16:
            raise GenerationError(f"scene size {self.size} too small")
        if not 1 <= self.min_objects <= self.max_objects:
            raise GenerationError("bad object count range")
        if self.background not in BACKGROUNDS:
            raise GenerationError(f"unknown background {self.background!r}")
        if not set(self.shapes) <= set(SHAPES):
            raise GenerationError(f"unknown shapes in {self.shapes}")
        if self.t_ep < 1 or self.vel_min < 0 or self.vel_max < self.vel_min:
            raise GenerationError("bad frame count or velocity range")
        if not 1 <= self.palette_size <= len(PALETTE):
            raise GenerationError("palette_size out of range")


@dataclass
class Episode:
    frames: np.ndarray            # (T, H, W, 3) uint8
    masks: np.ndarray             # (T, H, W) uint8
    object_colors: np.ndarray = field(default=None)   # (n, 3) uint8
    object_shapes: list = field(default_factory=list)


def _coverage(shape, cx, cy, r, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    # upward triangle: apex (cx, cy-r), base corners (cx -/+ r, cy + r)
    in_band = (yy >= cy - r) & (yy <= cy + r)
    half_width = (yy - (cy - r)) / 2.0
    return in_band & (np.abs(xx - cx) <= half_width)


def _background(cfg: SceneConfig, rng: Rng) -> np.ndarray:
    s = cfg.size
    if cfg.background == "flat":
        shade = int(rng.integers(90, 130, ()))
        return np.full((s, s, 3), shade, dtype=np.uint8)
    if cfg.background == "checker":
        # per-scene phase and shades; a background identical across scenes
        # would carry no information for a conditional model to latch onto
        cell = s // 8
        ox = int(rng.integers(0, cell, ()))
        oy = int(rng.integers(0, cell, ()))
        dark = int(rng.integers(92, 104, ()))
        light = dark + int(rng.integers(16, 26, ()))
        yy, xx = np.mgrid[0:s, 0:s]
        parity = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2
        img = np.where(parity == 0, dark, light).astype(np.uint8)
        return np.stack([img, img, img], axis=-1)
    return rng.integers(60, 160, (s, s, 3)).astype(np.uint8)


def _reflect(p, v, lo, hi):
    p = p + v
    if p < lo:
        p, v = 2 * lo - p, -v
    elif p > hi:
        p, v = 2 * hi - p, -v
    return p, v


def gen_episode(cfg: SceneConfig, seed: int) -> Episode:
    """Render one episode; fully determined by (cfg, seed)."""
    cfg.validate()
    rng = Rng(seed)
    s = cfg.size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1, ()))
    r_lo = max(4, s // 10)
    # cap sprite size by crowding so sequential rejection placement succeeds
    r_cap = int((math.sqrt(0.45 / n) * s - 4.0) / 2.0)
    r_hi = max(r_lo, min(max(6, s // 6), r_cap))

    bodies = []
    for _ in range(n):
        shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes), ()))]
        color = int(rng.integers(0, cfg.palette_size, ()))
        r = int(rng.integers(r_lo, r_hi + 1, ()))
        bodies.append((shape, color, r))
    bodies.sort(key=lambda b: -b[2])   # place big sprites first: easier packing

    placed = []  # (shape, color_idx, r, x, y, vx, vy)
    for i, (shape, color, r) in enumerate(bodies):
        ok = False
        for _ in range(100):
            x = float(rng.uniform(r + 1, s - 2 - r, ()))
            y = float(rng.uniform(r + 1, s - 2 - r, ()))
            if all((x - px) ** 2 + (y - py) ** 2 > (r + pr + 2) ** 2
                   for _, _, pr, px, py, _, _ in placed):
                ok = True
                break
        if not ok:
            raise GenerationError(f"could not place object {i} without overlap")
        speed = float(rng.uniform(cfg.vel_min, cfg.vel_max, ()))
        angle = float(rng.uniform(0.0, 2.0 * np.pi, ()))
        placed.append((shape, color, r, x, y, speed * np.cos(angle), speed * np.sin(angle)))

    bg = _background(cfg, rng.stream(1))
    frames = np.empty((cfg.t_ep, s, s, 3), dtype=np.uint8)
    masks = np.empty((cfg.t_ep, s, s), dtype=np.uint8)
    state = [list(p) for p in placed]
    for t in range(cfg.t_ep):
        frame = bg.copy()
        mask = np.zeros((s, s), dtype=np.uint8)
        for i, (shape, color, r, x, y, vx, vy) in enumerate(state):
            cover = _coverage(shape, round(x), round(y), r, s)
            frame[cover] = PALETTE[color]
            mask[cover] = i + 1
        frames[t] = frame
        masks[t] = mask
        for obj in state:
            shape, color, r = obj[0], obj[1], obj[2]
            obj[3], obj[5] = _reflect(obj[3], obj[5], r + 1, s - 2 - r)
            obj[4], obj[6] = _reflect(obj[4], obj[6], r + 1, s - 2 - r)
    colors = PALETTE[[p[1] for p in placed]]
    return Episode(frames=frames, masks=masks, object_colors=colors,
                   object_shapes=[p[0] for p in placed])


# -- on-disk datasets -----------------------------------------------------------


def write_dataset(directory, count: int, cfg: SceneConfig, seed: int) -> None:
    """Write `count` episodes as SDT1 pairs plus a manifest."""
    cfg.validate()
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        ep = gen_episode(cfg, seed + i)
        sdt.write_tensor(root / f"ep{i}_frames.sdt", ep.frames)
        sdt.write_tensor(root / f"ep{i}_masks.sdt", ep.masks)
    lines = [f"count {count}", f"seed {seed}"]
    for key, value in asdict(cfg).items():
        if key == "shapes":
            value = ",".join(value)
        lines.append(f"{key} {value}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.txt"
    if not path.is_file():
        raise sdt.FormatError(f"no manifest.txt under {directory}")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, value = line.split(" ", 1)
            out[key] = value
    return out


def manifest_config(manifest: dict) -> SceneConfig:
    return SceneConfig(
        size=int(manifest["size"]),
        min_objects=int(manifest["min_objects"]),
        max_objects=int(manifest["max_objects"]),
        shapes=tuple(manifest["shapes"].split(",")),
        palette_size=int(manifest.get("palette_size", 8)),
        background=manifest["background"],
        t_ep=int(manifest["t_ep"]),
        vel_min=float(manifest["vel_min"]),
        vel_max=float(manifest["vel_max"]),
    )


def read_dataset(directory):
    """Yield episodes in index order; round-trips write_dataset bit-exactly."""
    root = Path(directory)
    manifest = read_manifest(root)
    count = int(manifest["count"])
    for i in range(count):
        frames = sdt.read_tensor(root / f"ep{i}_frames.sdt")
        masks = sdt.read_tensor(root / f"ep{i}_masks.sdt")
        yield Episode(frames=frames, masks=masks)


def frames_float(frames: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [0,1]."""
    from . import tensor as tt
    dt = np.dtype(dtype) if dtype is not None else tt.default_dtype()
    arr = frames.astype(dt) / 255.0
    return np.ascontiguousarray(np.moveaxis(arr, -1, -3))
