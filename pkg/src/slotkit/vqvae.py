"""Vector-quantized image tokenizer.

The tokenizer is trained first and then frozen; diffusion runs on the
continuous encoder output z (4x downsampled, stored channel-first as
(B, D_vq, h, w)). Quantization snaps each latent vector to its nearest
codebook entry with a straight-through gradient, and the decoder maps
quantized latents back to a [0,1] image.

Training loss: reconstruction MSE + codebook term ||sg(z) - e||^2 +
beta_commit * ||z - sg(e)||^2. Codebook entries unused for `dead_steps`
consecutive steps are re-seeded from the current batch.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as tt
from .rng import Rng
from .tensor import ContractError, DimensionError, Tensor


class ResBlock(nn.Module):
    def __init__(self, width, rng: Rng):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, rng.stream(0), stride=1, pad=1)
        self.conv2 = nn.Conv2d(width, width, 3, rng.stream(1), stride=1, pad=1)

    def __call__(self, x):
        h = self.conv2(tt.relu(self.conv1(tt.relu(x))))
        return x + h


class VqVae(nn.Module):
    def __init__(self, d_vq=3, codebook_size=512, width=64, beta_commit=0.25,
                 dead_steps=200, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        if codebook_size < 2:
            raise ContractError("codebook needs at least 2 entries")
        self.d_vq = d_vq
        self.codebook_size = codebook_size
        self.beta_commit = beta_commit
        self.dead_steps = dead_steps
        self.enc1 = nn.Conv2d(3, width, 4, rng.stream(0), stride=2, pad=1)
        self.enc2 = nn.Conv2d(width, width, 4, rng.stream(1), stride=2, pad=1)
        self.enc_res = ResBlock(width, rng.stream(2))
        self.enc_out = nn.Conv2d(width, d_vq, 1, rng.stream(3))
        self.codebook = nn.parameter(rng.normal((codebook_size, d_vq)) * 0.5)
        self.dec_in = nn.Conv2d(d_vq, width, 1, rng.stream(4))
        self.dec_res = ResBlock(width, rng.stream(5))
        self.dec1 = nn.ConvTranspose2d(width, width, 4, rng.stream(6), stride=2, pad=1)
        self.dec2 = nn.ConvTranspose2d(width, 3, 4, rng.stream(7), stride=2, pad=1)
        # consecutive steps each entry has gone unused (training-time state)
        self.unused_steps = np.zeros(codebook_size, dtype=np.int32)

    # -- encode / quantize / decode -----------------------------------------

    def encode(self, x) -> Tensor:
        """(B,3,H,W) in [0,1] -> continuous latent (B, d_vq, H/4, W/4)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"input extents {x.shape[2:]} not divisible by 4")
        h = tt.relu(self.enc1(x))
        h = tt.relu(self.enc2(h))
        h = self.enc_res(h)
        return self.enc_out(h)

    def nearest_indices(self, z) -> np.ndarray:
        """Nearest codebook entry per latent vector; ties -> lowest index."""
        zd = z.data if isinstance(z, Tensor) else np.asarray(z)
        b, d, h, w = zd.shape
        flat = zd.transpose(0, 2, 3, 1).reshape(-1, d)
        e = self.codebook.data
        d2 = (flat * flat).sum(1, keepdims=True) - 2.0 * flat @ e.T + (e * e).sum(1)
        return d2.argmin(axis=1).reshape(b, h, w).astype(np.int32)

    def quantize(self, z):
        """Returns (indices (B,h,w) int32, zq with straight-through gradient)."""
        if self.codebook.data.shape[0] == 0:
            raise ContractError("empty codebook")
        idx = self.nearest_indices(z)
        entries = tt.gather_rows(self.codebook, idx)        # (B,h,w,d)
        zq_data = tt.transpose(entries, (0, 3, 1, 2))
        z = z if isinstance(z, Tensor) else Tensor(z)
        # straight-through: forward value is the entry, gradient passes to z
        zq = z + tt.stop_gradient(zq_data - z)
        return idx, zq

    def decode(self, zq) -> Tensor:
        zq = zq if isinstance(zq, Tensor) else Tensor(zq)
        h = self.dec_in(zq)
        h = self.dec_res(h)
        h = tt.relu(self.dec1(h))
        return tt.sigmoid(self.dec2(h))

    def reconstruct(self, x) -> Tensor:
        """Encode, quantize, decode; the full tokenizer round trip."""
        _, zq = self.quantize(self.encode(x))
        return self.decode(zq)

    # -- training ------------------------------------------------------------

    def train_loss(self, x):
        """Returns (total, recon_mse, codebook_term, commit_term) tensors.

        recon_mse is per-element mean squared error; the stop-gradient
        routing sends the codebook term to entries only and the commitment
        term to the encoder only.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        z = self.encode(x)
        idx, zq = self.quantize(z)
        x_hat = self.decode(zq)
        diff = x_hat - x
        recon = (diff * diff).mean()
        entries = tt.transpose(tt.gather_rows(self.codebook, idx), (0, 3, 1, 2))
        ce = entries - tt.stop_gradient(z)
        codebook_term = (ce * ce).mean()
        cm = z - tt.stop_gradient(entries)
        commit_term = (cm * cm).mean()
        total = recon + codebook_term + self.beta_commit * commit_term
        self._last_indices = idx
        return total, recon, codebook_term, commit_term

    def refresh_dead_entries(self, z, rng: Rng):
        """Re-seed codebook entries unused for `dead_steps` consecutive steps.

        `z` is the latest batch of continuous latents; call after each
        optimizer step with the indices produced by train_loss.
        """
        idx = getattr(self, "_last_indices", None)
        if idx is None:
            return 0
        used = np.zeros(self.codebook_size, dtype=bool)
        used[np.unique(idx)] = True
        self.unused_steps[used] = 0
        self.unused_steps[~used] += 1
        dead = np.flatnonzero(self.unused_steps >= self.dead_steps)
        if dead.size == 0:
            return 0
        zd = z.data if isinstance(z, Tensor) else np.asarray(z)
        flat = zd.transpose(0, 2, 3, 1).reshape(-1, self.d_vq)
        picks = rng.integers(0, flat.shape[0], (dead.size,))
        self.codebook.data[dead] = flat[picks].astype(self.codebook.data.dtype)
        self.unused_steps[dead] = 0
        return int(dead.size)

    def latent_hw(self, image_hw: int) -> int:
        return image_hw // 4
