"""slotkit: desk-scale object-centric learning.

Unsupervised object discovery with slot attention, decoded by iterative
denoising of frozen-tokenizer latents; includes a mixture-decoder
baseline, concept libraries with compositional generation and editing,
segmentation metrics with brute-force-verified implementations, and a
deterministic synthetic data generator.
"""

from .tensor import (Tensor, GradTape, TAPE, backward, grad_check, no_grad,
                     set_default_dtype, default_dtype)
from .rng import Rng
from .diffusion import NoiseSchedule, build_schedule, q_sample, denoise_loss, \
    ancestral_step, sample, fast_sample
from .slot_core import SlotAttention, TransformerPredictor, segment_from_attention
from .perception import ImageEncoder, positional_grid
from .mixture_decoder import SpatialBroadcastDecoder, MixtureOutput, mixture_loss
from .vqvae import VqVae
from .denoiser import UNet, UNetConfig, CrossAttention, timestep_embedding
from .video import SlotModel, SlotTrajectory, train_clip_step
from .metrics import ari, fg_ari, miou, mbo, mse_metric, flatten_video
from .concepts import ConceptLibrary, kmeans, build_library, compose, \
    edit_remove, edit_insert, edit_swap
from .datagen import SceneConfig, Episode, gen_episode, write_dataset, read_dataset

__version__ = "0.1.0"
