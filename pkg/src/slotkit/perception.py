"""Image encoder producing a flattened, position-aware feature set.

A small strided CNN (kernel 5, strides 1,2,2,1) maps a [0,1] RGB image to
an (H/4, W/4) grid, adds a learned projection of a 4-channel normalized
border-distance positional grid, layer-normalizes each vector, and applies
a final 1x1 projection. Output is a set of M = (H/4)*(W/4) vectors.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as tt
from .rng import Rng
from .tensor import RangeError, Tensor

_GRID_CACHE = {}


def positional_grid(hs: int, ws: int) -> np.ndarray:
    """(hs*ws, 4) grid; channels (x, y, 1-x, 1-y), coordinates in [0,1]."""
    if hs < 1 or ws < 1:
        raise tt.DimensionError("positional grid extents must be >= 1")
    key = (hs, ws)
    if key not in _GRID_CACHE:
        ys = np.linspace(0.0, 1.0, hs) if hs > 1 else np.zeros(1)
        xs = np.linspace(0.0, 1.0, ws) if ws > 1 else np.zeros(1)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        grid = np.stack([gx, gy, 1.0 - gx, 1.0 - gy], axis=-1).reshape(hs * ws, 4)
        _GRID_CACHE[key] = grid
    return _GRID_CACHE[key].astype(tt.default_dtype(), copy=True)


class ImageEncoder(nn.Module):
    """CNN encoder f_enc: (B,3,H,W) in [0,1] -> (B, M, d_enc)."""

    def __init__(self, d_enc=64, width=64, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.d_enc = d_enc
        self.width = width
        k, p = 5, 2
        self.conv1 = nn.Conv2d(3, width, k, rng.stream(0), stride=1, pad=p)
        self.conv2 = nn.Conv2d(width, width, k, rng.stream(1), stride=2, pad=p)
        self.conv3 = nn.Conv2d(width, width, k, rng.stream(2), stride=2, pad=p)
        self.conv4 = nn.Conv2d(width, width, k, rng.stream(3), stride=1, pad=p)
        self.pos_proj = nn.Linear(4, width, rng.stream(4))
        self.norm = nn.LayerNorm(width, eps=1e-6)
        self.out_proj = nn.Linear(width, d_enc, rng.stream(5))

    def __call__(self, x, return_pre_projection=False):
        if isinstance(x, Tensor):
            raw = x.data
        else:
            raw = np.asarray(x)
            x = Tensor(raw)
        if raw.min() < 0.0 or raw.max() > 1.0:
            raise RangeError("encoder input must lie in [0,1]")
        h = tt.relu(self.conv1(x))
        h = tt.relu(self.conv2(h))
        h = tt.relu(self.conv3(h))
        h = tt.relu(self.conv4(h))
        b, c, hs, ws = h.shape
        h = tt.transpose(h.reshape(b, c, hs * ws), (0, 2, 1))   # (B, M, width)
        pos = self.pos_proj(Tensor(positional_grid(hs, ws)))    # (M, width)
        h = h + pos
        pre = self.norm(h)
        out = self.out_proj(pre)
        if return_pre_projection:
            return out, pre
        return out
