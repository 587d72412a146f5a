"""Plain-text reports and PPM image sidecars.

Reports are key=value lines plus optional tab-separated per-sample
tables; previews are binary P6 PPM, a format simple enough to be byte
reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_report(path, scores: dict, per_sample=None, columns=None):
    """Write key=value lines; optionally a sibling *_per_sample.tsv table."""
    lines = [f"{key}={scores[key]}" for key in scores
             if isinstance(scores[key], (int, float, str))]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    if per_sample is None:
        return None
    columns = columns or sorted(per_sample[0])
    rows = ["\t".join(["sample"] + columns)]
    for i, row in enumerate(per_sample):
        rows.append("\t".join([str(i)] + [f"{row[c]}" for c in columns]))
    table_path = Path(path).with_name(Path(path).stem + "_per_sample.tsv")
    table_path.write_text("\n".join(rows) + "\n")
    return table_path


def write_ppm(path, image) -> None:
    """image: (3, H, W) float in [0,1] or (H, W, 3) uint8."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"need an image, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.dtype.kind == "f":
        arr = np.moveaxis(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5, 0, -1).astype(np.uint8)
    if arr.shape[-1] != 3 or arr.dtype != np.uint8:
        raise ValueError("image must convert to (H, W, 3) uint8")
    h, w = arr.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
