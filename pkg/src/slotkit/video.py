"""Composite slot model and its recurrent application to clips.

A `SlotModel` bundles the image encoder, slot attention, an optional
transformer predictor, and one decoder (latent-denoising U-Net or the
mixture baseline). Frame 1 slots come from the learned initialization;
every later frame is initialized by the predictor from the previous
frame's slots and refined by slot attention, so slot indices track the
same entity across frames by construction. A single-frame clip reduces to
the plain image pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from . import nn
from .denoiser import UNet, UNetConfig
from .diffusion import NoiseSchedule, denoise_loss
from .mixture_decoder import SpatialBroadcastDecoder, mixture_loss
from .perception import ImageEncoder
from .rng import Rng
from .slot_core import SlotAttention, TransformerPredictor, segment_from_attention
from .tensor import Tensor


@dataclass
class SlotTrajectory:
    """Per-frame slot states and attention maps with stable slot indices."""

    slots: list = field(default_factory=list)   # T x (B, N, D)
    attn: list = field(default_factory=list)    # T x (B, N, M)

    def masks(self, height, width) -> np.ndarray:
        """(B, T, H, W) int32 segmentation from the per-frame attention."""
        per_frame = [segment_from_attention(a, height, width) for a in self.attn]
        return np.stack(per_frame, axis=1)


class SlotModel(nn.Module):
    """Encoder + slot attention + predictor + decoder.

    `decoder` selects the reconstruction path: "diffusion" decodes slots by
    denoising tokenizer latents, "mixture" by spatial broadcast. Attribute
    names double as checkpoint entry prefixes.
    """

    def __init__(self, n_slots=5, d_slot=192, d_enc=64, enc_width=64, sa_iters=3,
                 sigma_init=0.0, decoder="diffusion", unet: UNetConfig | None = None,
                 image_hw=64, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.decoder_kind = decoder
        self.image_hw = image_hw
        self.perception = ImageEncoder(d_enc=d_enc, width=enc_width, rng=rng.stream(1))
        self.slot_core = SlotAttention(n_slots, d_in=d_enc, d_slot=d_slot,
                                       iters=sa_iters, sigma_init=sigma_init,
                                       rng=rng.stream(2))
        self.predictor = TransformerPredictor(d_slot=d_slot, rng=rng.stream(3))
        if decoder == "diffusion":
            self.denoiser = UNet(unet or UNetConfig(d_cond=d_slot), rng=rng.stream(4))
        elif decoder == "mixture":
            self.mixture_decoder = SpatialBroadcastDecoder(
                d_slot=d_slot, base=image_hw // 8, out_hw=image_hw, rng=rng.stream(4))
        else:
            raise tt.ContractError(f"unknown decoder kind {decoder!r}")

    # -- single frame ---------------------------------------------------------

    def encode_slots(self, images, init=None, rng: Rng | None = None):
        """Images (B,3,H,W) -> (slots, attention)."""
        feats = self.perception(images)
        return self.slot_core(feats, init=init, rng=rng)

    def segment(self, images, rng: Rng | None = None) -> np.ndarray:
        _, attn = self.encode_slots(images, rng=rng)
        return segment_from_attention(attn, self.image_hw, self.image_hw)

    # -- clips ------------------------------------------------------------------

    def run_video(self, clip, rng: Rng | None = None) -> SlotTrajectory:
        """clip (B, T, 3, H, W) -> per-frame slots/attention, recurrently."""
        clip = clip if isinstance(clip, Tensor) else Tensor(clip)
        b, t_clip = clip.shape[0], clip.shape[1]
        traj = SlotTrajectory()
        init = None
        for t in range(t_clip):
            frame = clip[:, t]
            slots, attn = self.encode_slots(frame, init=init, rng=rng)
            traj.slots.append(slots)
            traj.attn.append(attn)
            init = self.predictor(slots)
        return traj


def train_clip_step(model: SlotModel, vqvae, z_scale, sched: NoiseSchedule,
                    clip, rng: Rng):
    """Denoising loss for one clip batch, averaged over frames.

    The tokenizer is frozen: its latents are computed without recording,
    scaled by 1/z_scale, and treated as constants. Gradients flow into the
    model through the per-frame slots, including across the predictor
    recurrence.
    """
    clip = clip if isinstance(clip, Tensor) else Tensor(clip)
    t_clip = clip.shape[1]
    traj = model.run_video(clip, rng=rng)
    losses = []
    for t in range(t_clip):
        with tt.no_grad():
            z0 = vqvae.encode(clip[:, t]).data / z_scale
        losses.append(denoise_loss(z0, traj.slots[t], sched, model.denoiser,
                                   rng.stream(t)))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / t_clip)


def train_image_step(model: SlotModel, vqvae, z_scale, sched: NoiseSchedule,
                     images, rng: Rng):
    """Single-frame specialization of the clip loss (no predictor involved)."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    slots, _ = model.encode_slots(images, rng=rng)
    with tt.no_grad():
        z0 = vqvae.encode(images).data / z_scale
    return denoise_loss(z0, slots, sched, model.denoiser, rng.stream(0))


def train_mixture_step(model: SlotModel, images, rng: Rng):
    """Pixel-space mixture baseline loss for one image batch."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    slots, _ = model.encode_slots(images, rng=rng)
    return mixture_loss(model.mixture_decoder(slots), images)
