"""Spatial-broadcast mixture decoder and its pixel reconstruction loss.

Each slot is broadcast to a small grid, decorated with positional
features, and upsampled by transposed convolutions to an RGB image plus an
alpha logit. Alphas are softmax-normalized across slots per pixel and the
reconstruction is the alpha-weighted sum of the per-slot images.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import nn
from . import tensor as tt
from .perception import positional_grid
from .rng import Rng
from .tensor import DimensionError, Tensor


@dataclass
class MixtureOutput:
    rgb: Tensor     # (B, N, 3, H, W) per-slot images
    alpha: Tensor   # (B, N, 1, H, W), sums to 1 over N per pixel
    recon: Tensor   # (B, 3, H, W)


class SpatialBroadcastDecoder(nn.Module):
    """Per-slot broadcast decoder: (B, N, d_slot) -> MixtureOutput.

    Broadcast grid is `base` x `base`; three stride-2 transposed
    convolutions upsample 8x to the output resolution.
    """

    def __init__(self, d_slot=192, width=64, base=8, out_hw=64, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        if base * 8 != out_hw:
            raise DimensionError(f"broadcast base {base} cannot reach {out_hw} by 8x upsampling")
        self.base = base
        self.out_hw = out_hw
        self.d_slot = d_slot
        self.pos_proj = nn.Linear(4, d_slot, rng.stream(0))
        self.up1 = nn.ConvTranspose2d(d_slot, width, 4, rng.stream(1), stride=2, pad=1)
        self.up2 = nn.ConvTranspose2d(width, width, 4, rng.stream(2), stride=2, pad=1)
        self.up3 = nn.ConvTranspose2d(width, width, 4, rng.stream(3), stride=2, pad=1)
        self.head = nn.Conv2d(width, 4, 3, rng.stream(4), stride=1, pad=1)

    def __call__(self, slots) -> MixtureOutput:
        b, n, d = slots.shape
        g = self.base
        # broadcast each slot over the grid, then add positional features
        h = tt.expand(slots.reshape(b * n, 1, d), (b * n, g * g, d))
        h = h + self.pos_proj(Tensor(positional_grid(g, g)))
        h = tt.transpose(h, (0, 2, 1)).reshape(b * n, d, g, g)
        h = tt.relu(self.up1(h))
        h = tt.relu(self.up2(h))
        h = tt.relu(self.up3(h))
        out = self.head(h)                                  # (B*N, 4, H, W)
        hw = self.out_hw
        out = out.reshape(b, n, 4, hw, hw)
        rgb = out[:, :, :3]
        alpha = tt.softmax(out[:, :, 3:4], axis=1)
        recon = (alpha * rgb).sum(axis=1)
        return MixtureOutput(rgb=rgb, alpha=alpha, recon=recon)


def mixture_loss(out: MixtureOutput, x) -> Tensor:
    """Squared error summed over channels and pixels, averaged over batch.

    For clips, fold frames into the batch axis first and rescale: the loss
    convention sums over frames of a clip.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != out.recon.shape:
        raise DimensionError(f"target {x.shape} != reconstruction {out.recon.shape}")
    diff = out.recon - x
    per_image = (diff * diff).sum(axis=(1, 2, 3))
    return per_image.mean()
