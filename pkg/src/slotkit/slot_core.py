"""Slot attention, slot initialization, the transformer predictor, and the
attention-map segmentation readout.

The attention normalization follows the classic recipe: softmax over the
slot axis (slots compete for input locations), then a weighted mean over
locations with an epsilon-guarded denominator. The attention map returned
with the slots is always the one computed before the final update, and the
map from the last iteration doubles as the predicted segmentation.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from . import tensor as tt
from .rng import Rng
from .tensor import DimensionError, Tensor


class SlotAttention(nn.Module):
    """Iterative attention f_SA over a feature set.

    Slots live in R^{d_slot}; features of width d_in are layer-normalized
    once, projected to keys/values, and attended to by slot queries. Each
    iteration refines slots with a gated recurrent update plus a residual
    perceptron. Learnable base vectors initialize the slots; sigma_init
    scales an optional per-sample Gaussian perturbation (0 = deterministic).
    """

    def __init__(self, n_slots, d_in, d_slot=192, iters=3, eps=1e-8,
                 sigma_init=0.0, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.n_slots = n_slots
        self.d_slot = d_slot
        self.iters = iters
        self.eps = eps
        self.sigma_init = sigma_init
        self.base = nn.parameter(rng.normal((n_slots, d_slot)) * 0.5)
        self.norm_in = nn.LayerNorm(d_in)
        self.norm_slots = nn.LayerNorm(d_slot)
        self.norm_mlp = nn.LayerNorm(d_slot)
        self.proj_q = nn.Linear(d_slot, d_slot, rng.stream(0), bias=False)
        self.proj_k = nn.Linear(d_in, d_slot, rng.stream(1), bias=False)
        self.proj_v = nn.Linear(d_in, d_slot, rng.stream(2), bias=False)
        self.gru = nn.GRUCell(d_slot, d_slot, rng.stream(3))
        self.mlp = nn.Mlp(d_slot, d_slot, d_slot, rng.stream(4))

    def init_slots(self, batch: int, rng: Rng | None = None) -> Tensor:
        """Broadcast the learned base vectors to a batch of slot sets."""
        base = tt.expand(self.base.reshape(1, self.n_slots, self.d_slot),
                         (batch, self.n_slots, self.d_slot))
        if self.sigma_init > 0.0:
            if rng is None:
                raise tt.ContractError("sigma_init > 0 requires an rng")
            noise = rng.normal((batch, self.n_slots, self.d_slot)).astype(
                tt.default_dtype())
            base = base + Tensor(noise * self.sigma_init)
        return base

    def _kv(self, feats):
        f = self.norm_in(feats)
        return self.proj_k(f), self.proj_v(f)

    def step(self, slots, feats):
        """One attention iteration; returns (updated slots, pre-update attention)."""
        k, v = self._kv(feats)
        return self._step_kv(slots, k, v)

    def _step_kv(self, slots, k, v):
        q = self.proj_q(self.norm_slots(slots))                    # (B, N, D)
        logits = tt.matmul(q, tt.transpose(k, (0, 2, 1)))          # (B, N, M)
        logits = logits * (1.0 / math.sqrt(self.d_slot))
        attn = tt.softmax(logits, axis=1)                          # over slots
        weights = attn / (attn.sum(axis=2, keepdims=True) + self.eps)
        updates = tt.matmul(weights, v)                            # (B, N, D)
        b, n, d = updates.shape
        new = self.gru(updates.reshape(b * n, d), slots.reshape(b * n, d))
        new = new.reshape(b, n, d)
        new = new + self.mlp(self.norm_mlp(new))
        return new, attn

    def __call__(self, feats, init=None, iters=None, rng: Rng | None = None):
        """Run `iters` refinement steps; returns final slots and the last
        iteration's attention map (B, N, M)."""
        iters = self.iters if iters is None else iters
        if iters < 1:
            raise tt.ContractError("slot attention needs iters >= 1")
        slots = self.init_slots(feats.shape[0], rng) if init is None else init
        k, v = self._kv(feats)
        attn = None
        for _ in range(iters):
            slots, attn = self._step_kv(slots, k, v)
        return slots, attn


class TransformerPredictor(nn.Module):
    """One self-attention encoder block predicting the next slot state.

    Permutation-equivariant over slots; zeroing both output projections
    reduces it to the identity via the residual paths.
    """

    def __init__(self, d_slot=192, heads=4, mlp_hidden=None, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        if d_slot % heads:
            raise DimensionError(f"d_slot {d_slot} not divisible by {heads} heads")
        self.heads = heads
        self.d_slot = d_slot
        mlp_hidden = mlp_hidden or 2 * d_slot
        self.norm_attn = nn.LayerNorm(d_slot)
        self.norm_mlp = nn.LayerNorm(d_slot)
        self.proj_q = nn.Linear(d_slot, d_slot, rng.stream(0), bias=False)
        self.proj_k = nn.Linear(d_slot, d_slot, rng.stream(1), bias=False)
        self.proj_v = nn.Linear(d_slot, d_slot, rng.stream(2), bias=False)
        self.proj_out = nn.Linear(d_slot, d_slot, rng.stream(3))
        self.mlp = nn.Mlp(d_slot, mlp_hidden, d_slot, rng.stream(4))

    def _split_heads(self, x):
        b, n, d = x.shape
        h = self.heads
        return tt.transpose(x.reshape(b, n, h, d // h), (0, 2, 1, 3))  # (B,H,N,dh)

    def __call__(self, slots):
        b, n, d = slots.shape
        x = self.norm_attn(slots)
        q = self._split_heads(self.proj_q(x))
        k = self._split_heads(self.proj_k(x))
        v = self._split_heads(self.proj_v(x))
        logits = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.heads))
        attn = tt.softmax(logits, axis=-1)
        ctx = tt.matmul(attn, v)                                   # (B,H,N,dh)
        ctx = tt.transpose(ctx, (0, 2, 1, 3)).reshape(b, n, d)
        slots = slots + self.proj_out(ctx)
        return slots + self.mlp(self.norm_mlp(slots))


def segment_from_attention(attn, height: int, width: int) -> np.ndarray:
    """Argmax segmentation from an attention map.

    `attn` is (B, N, M) with M = (height/4)*(width/4). The map is reshaped
    to the latent grid, upsampled 4x nearest-neighbor, and argmaxed over
    slots per pixel; ties go to the lowest slot index.
    """
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    b, n, m = a.shape
    hs, ws = height // 4, width // 4
    if hs * ws != m or height % 4 or width % 4:
        raise DimensionError(
            f"attention has {m} locations, incompatible with {height}x{width}")
    grid = a.reshape(b, n, hs, ws)
    up = grid.repeat(4, axis=2).repeat(4, axis=3)
    return up.argmax(axis=1).astype(np.int32)
