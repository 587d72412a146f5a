"""Scene-decomposition and reconstruction metrics.

Segmentation scores are computed from integer contingency tables and
reduced with exact rational arithmetic before the single final conversion
to float, so results are invariant to summation order and match
brute-force oracles exactly. The mIoU matching is an optimal one-to-one
assignment (Hungarian) between ground-truth and predicted segments; mBO
relaxes it to a per-ground-truth best overlap with reuse allowed.

Video masks are scored after flattening time into the first spatial axis,
which makes slot-identity swaps between frames count as errors.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import DimensionError, RangeError


class MetricError(ValueError):
    """The metric is undefined on this input (e.g. no foreground)."""


def _as_labels(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = flatten_video(arr)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d (or 3-d video) mask, got shape {arr.shape}")
    return arr.astype(np.int64, copy=False)


def _contingency(pred, gt):
    """Integer contingency table plus the distinct label lists."""
    pv, pi = np.unique(pred, return_inverse=True)
    gv, gi = np.unique(gt, return_inverse=True)
    table = np.zeros((gv.size, pv.size), dtype=np.int64)
    np.add.at(table, (gi.reshape(-1), pi.reshape(-1)), 1)
    return table, gv, pv


def _comb2(n):
    return (n * (n - 1)) // 2


def _ari_from_counts(sum_cells, sum_rows, sum_cols, pairs_total) -> float:
    """Chance-corrected agreement from exact pair counts."""
    if pairs_total == 0:
        return 1.0
    expected = Fraction(sum_rows * sum_cols, pairs_total)
    maximum = Fraction(sum_rows + sum_cols, 2)
    denom = maximum - expected
    if denom == 0:
        # both partitions trivial (all-one-cluster or all-singletons): identical
        return 1.0
    return float((Fraction(sum_cells) - expected) / denom)


def ari(pred, gt) -> float:
    """Adjusted Rand index in [-0.5, 1] with the permutation-model correction."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    table, _, _ = _contingency(pred.reshape(-1), gt.reshape(-1))
    sum_cells = int(_comb2(table).sum())
    sum_rows = int(_comb2(table.sum(axis=1)).sum())
    sum_cols = int(_comb2(table.sum(axis=0)).sum())
    return _ari_from_counts(sum_cells, sum_rows, sum_cols, int(_comb2(table.sum())))


def fg_ari(pred, gt, background_id=0) -> float:
    """ARI restricted to pixels whose ground-truth label is foreground."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    keep = gt != background_id
    if not keep.any():
        raise MetricError("no foreground pixels; fg_ari undefined")
    return ari(pred[keep].reshape(1, -1), gt[keep].reshape(1, -1))


def _iou_table(pred, gt):
    """Per-(gt, pred) segment intersection and union counts."""
    table, gv, pv = _contingency(pred.reshape(-1), gt.reshape(-1))
    gt_sizes = table.sum(axis=1)
    pred_sizes = table.sum(axis=0)
    unions = gt_sizes[:, None] + pred_sizes[None, :] - table
    return table, unions


def miou(pred, gt) -> float:
    """Mean IoU over ground-truth segments under an optimal one-to-one match.

    Unmatched ground-truth segments contribute 0; the mean runs over all
    ground-truth segments including background.
    """
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter, unions = _iou_table(pred, gt)
    n_gt = inter.shape[0]
    # assignment on the float matrix, exact rational reduction of the chosen
    # pairs: gaps between distinct assignment totals dwarf float64 rounding,
    # so the achieved total is exactly optimal
    iou = inter / np.maximum(unions, 1)
    rows, cols = linear_sum_assignment(-iou)
    total = Fraction(0)
    for r, c in zip(rows, cols):
        if inter[r, c] > 0:
            total += Fraction(int(inter[r, c]), int(unions[r, c]))
    return float(total / n_gt)


def mbo(pred, gt) -> float:
    """Mean best overlap: per ground-truth segment the max IoU over predicted
    segments (reuse allowed), averaged over ground-truth segments."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter, unions = _iou_table(pred, gt)
    total = Fraction(0)
    for r in range(inter.shape[0]):
        best = Fraction(0)
        for c in range(inter.shape[1]):
            if inter[r, c] > 0:
                iou = Fraction(int(inter[r, c]), int(unions[r, c]))
                if iou > best:
                    best = iou
        total += best
    return float(total / inter.shape[0])


def mse_metric(x, x_hat) -> float:
    """Squared error summed over channels and pixels, averaged over images.

    Accepts (B,3,H,W) batches or (B,T,3,H,W) videos; for videos the
    per-frame values are averaged over time. Inputs must lie in [0,1].
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    for arr in (x, x_hat):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise RangeError("mse_metric inputs must lie in [0,1]")
    if x.ndim == 5:
        per_frame = ((x - x_hat) ** 2).sum(axis=(2, 3, 4))   # (B, T)
        return float(per_frame.mean(axis=1).mean())
    if x.ndim != 4:
        raise DimensionError(f"expected (B,3,H,W) or (B,T,3,H,W), got {x.shape}")
    per_image = ((x - x_hat) ** 2).sum(axis=(1, 2, 3))
    return float(per_image.mean())


def flatten_video(masks) -> np.ndarray:
    """(T, H, W) -> (T*H, W): concatenate frames along the first spatial axis
    so downstream metrics see tracking consistency."""
    arr = np.asarray(masks)
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3:
        raise DimensionError(f"expected (T,H,W), got {arr.shape}")
    t, h, w = arr.shape
    return arr.reshape(t * h, w)
