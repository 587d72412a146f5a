"""Optimizer, schedules, training loops, evaluation, and checkpoints.

Every source of randomness in a run is drawn from streams keyed by
(seed, purpose, step), so a rerun with the same config is bit-identical
and a resumed run continues exactly where the interrupted one would have
gone. Checkpoints carry parameters, Adam state, and run metadata; the
tokenizer checkpoint also stores the latent scale used by the diffusion
decoder and a digest that training verifies to enforce the frozen
contract.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import sdt
from . import tensor as tt
from .config import RunConfig
from .datagen import frames_float, read_dataset, read_manifest
from .denoiser import UNetConfig
from .diffusion import NoiseSchedule, build_schedule, denoise_loss, fast_sample, sample
from .metrics import fg_ari, flatten_video, mbo, miou, mse_metric
from .rng import Rng
from .tensor import Tensor
from .video import SlotModel, train_clip_step, train_image_step, train_mixture_step
from .vqvae import VqVae

# rng stream namespaces
NS_INIT, NS_STEP, NS_EVAL, NS_SAMPLE = 0, 1, 2, 3


class NumericDivergence(RuntimeError):
    """Loss became non-finite; carries the failing step index."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class CheckpointMismatch(RuntimeError):
    """Resume state disagrees with the requested run."""


class FrozenViolation(RuntimeError):
    """A frozen model's parameters changed."""


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            p.data -= lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_entries(self, names):
        out = {"opt/t": np.array([self.t], dtype=np.int32)}
        for name, m, v in zip(names, self.m, self.v):
            out[f"opt/m/{name}"] = m
            out[f"opt/v/{name}"] = v
        return out

    def load_state_entries(self, entries, names):
        self.t = int(entries["opt/t"][0])
        for i, name in enumerate(names):
            self.m[i] = entries[f"opt/m/{name}"].astype(self.m[i].dtype)
            self.v[i] = entries[f"opt/v/{name}"].astype(self.v[i].dtype)


def clip_grad_norm(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def lr_at(step, cfg: RunConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to 1% of it."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * progress)))


# -- data ------------------------------------------------------------------------


class EpisodeData:
    """In-memory dataset view with a train/holdout split over episodes."""

    def __init__(self, data_dir, holdout):
        self.manifest = read_manifest(data_dir)
        self.episodes = list(read_dataset(data_dir))
        if holdout >= len(self.episodes):
            raise CheckpointMismatch(
                f"holdout {holdout} >= dataset size {len(self.episodes)}")
        self.holdout = holdout
        self.size = int(self.manifest["size"])
        self.t_ep = int(self.manifest["t_ep"])

    @property
    def n_train(self):
        return len(self.episodes) - self.holdout

    def train_images(self, idx):
        """First frames of the chosen training episodes as float (B,3,H,W)."""
        return frames_float(np.stack([self.episodes[i].frames[0] for i in idx]))

    def train_clips(self, ep_idx, starts, clip_len):
        clips = [self.episodes[i].frames[s:s + clip_len]
                 for i, s in zip(ep_idx, starts)]
        return frames_float(np.stack(clips))

    def holdout_episodes(self):
        return self.episodes[self.n_train:]


def sample_image_batch(data: EpisodeData, batch, rng: Rng):
    idx = rng.integers(0, data.n_train, (batch,))
    return data.train_images(idx)


def sample_clip_batch(data: EpisodeData, batch, clip_len, rng: Rng):
    if clip_len > data.t_ep:
        raise CheckpointMismatch(f"clip_len {clip_len} > episode length {data.t_ep}")
    ep_idx = rng.integers(0, data.n_train, (batch,))
    starts = rng.integers(0, data.t_ep - clip_len + 1, (batch,))
    return data.train_clips(ep_idx, starts, clip_len)


# -- checkpoints -------------------------------------------------------------------


def config_digest(cfg: RunConfig) -> str:
    from .config import dump_config
    import hashlib
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def save_model_checkpoint(directory, module, opt: Adam, meta: dict):
    names = [name for name, _ in module.named_parameters()]
    entries = {name: p.data for name, p in module.named_parameters()}
    entries.update(opt.state_entries(names))
    if hasattr(module, "unused_steps"):
        entries["state/unused_steps"] = module.unused_steps
    sdt.save_checkpoint(directory, entries, meta=meta)


def load_model_checkpoint(directory, module, opt: Adam | None = None):
    entries, meta = sdt.load_checkpoint(directory)
    module.load_state(entries)
    if hasattr(module, "unused_steps") and "state/unused_steps" in entries:
        module.unused_steps = entries["state/unused_steps"].astype(np.int32)
    if opt is not None:
        names = [name for name, _ in module.named_parameters()]
        opt.load_state_entries(entries, names)
    return meta


def vq_param_digest(vq: VqVae) -> str:
    return sdt.entries_digest({name: p.data for name, p in vq.named_parameters()})


def build_vqvae(cfg: RunConfig) -> VqVae:
    return VqVae(d_vq=cfg.vq_dim, codebook_size=cfg.vq_codebook, width=cfg.vq_width,
                 beta_commit=cfg.vq_commit, rng=Rng(cfg.seed).stream(NS_INIT, 0))


def build_slot_model(cfg: RunConfig, decoder="diffusion") -> SlotModel:
    unet = UNetConfig(in_channels=cfg.vq_dim, base_width=cfg.unet_width,
                      channel_mults=cfg.ints("unet_mults"),
                      attn_levels=cfg.ints("unet_attn_levels"),
                      time_dim=cfg.unet_time_dim, heads=cfg.unet_heads,
                      d_cond=cfg.d_slot)
    data_size = 64
    manifest = Path(cfg.data_dir) / "manifest.txt"
    if manifest.is_file():
        data_size = int(read_manifest(cfg.data_dir)["size"])
    return SlotModel(n_slots=cfg.n_slots, d_slot=cfg.d_slot, d_enc=cfg.d_enc,
                     enc_width=cfg.enc_width, sa_iters=cfg.sa_iters,
                     sigma_init=cfg.sigma_init, decoder=decoder, unet=unet,
                     image_hw=data_size, rng=Rng(cfg.seed).stream(NS_INIT, 1))


def apply_dtype(cfg: RunConfig):
    tt.set_default_dtype(np.float64 if cfg.dtype == "f64" else np.float32)


# -- tokenizer training ---------------------------------------------------------------


def compute_latent_scale(vq: VqVae, data: EpisodeData, limit=64) -> float:
    """Std over continuous latents of up to `limit` training images."""
    idx = list(range(min(limit, data.n_train)))
    with tt.no_grad():
        z = vq.encode(data.train_images(idx)).data
    return float(np.std(z.astype(np.float64)) + 1e-8)


def train_vqvae(cfg: RunConfig, log=None, resume=None, stop_after=None):
    """Two-stage contract, stage one: pre-train and freeze the tokenizer.

    Returns (vqvae, history, meta) and writes checkpoint + loss log under
    cfg.out_dir/vqvae. `stop_after` ends the session early at that step (an
    interruption); resuming such a checkpoint under the same config lands
    bit-exactly where the uninterrupted run would have.
    """
    apply_dtype(cfg)
    data = EpisodeData(cfg.data_dir, cfg.holdout)
    vq = build_vqvae(cfg)
    names = [name for name, _ in vq.named_parameters()]
    opt = Adam(vq.parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed)
    start_step = 0
    if resume is not None:
        meta = load_model_checkpoint(resume, vq, opt)
        if meta.get("config") != config_digest(cfg):
            raise CheckpointMismatch("resume checkpoint built from a different config")
        start_step = int(meta["step"])
    end_step = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
    history = []
    for step in range(start_step, end_step):
        rng_step = rng.stream(NS_STEP, step)
        x = sample_image_batch(data, cfg.batch, rng_step.stream(0))
        total, recon, codebook_term, commit = vq.train_loss(x)
        value = total.item()
        if not math.isfinite(value):
            raise NumericDivergence(f"vqvae loss non-finite at step {step}", step)
        tt.backward(total)
        clip_grad_norm(vq.parameters(), cfg.grad_clip)
        opt.step(lr_at(step, cfg))
        opt.zero_grad()
        vq.refresh_dead_entries(_last_z(vq, x), rng_step.stream(1))
        history.append((step, value, recon.item()))
        if log and (step % 100 == 0 or step == end_step - 1):
            log(f"vqvae step {step} loss {value:.5f} recon {recon.item():.5f}")
    z_scale = compute_latent_scale(vq, data)
    meta = {
        "kind": "vqvae", "step": str(end_step), "config": config_digest(cfg),
        "dtype": cfg.dtype, "z_scale": repr(z_scale), "frozen": "true",
        "digest": vq_param_digest(vq),
    }
    out = Path(cfg.out_dir) / "vqvae"
    save_model_checkpoint(out, vq, opt, meta)
    _write_run_config(out, cfg)
    _write_history(out / "loss_curve.txt", history)
    return vq, history, meta


def _last_z(vq: VqVae, x):
    with tt.no_grad():
        return vq.encode(Tensor(x))


def _write_history(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(f"{v}" for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_run_config(out_dir, cfg: RunConfig):
    from .config import dump_config
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_config.txt").write_text(dump_config(cfg))


# -- slot model training -----------------------------------------------------------------


def load_frozen_vqvae(cfg: RunConfig, vq_dir):
    vq = build_vqvae(cfg)
    entries, meta = sdt.load_checkpoint(vq_dir)
    vq.load_state(entries)
    for p in vq.parameters():
        p.requires_grad = False
    z_scale = float(meta["z_scale"])
    return vq, z_scale, meta


def train_slot_model(cfg: RunConfig, vq_dir, decoder="diffusion", log=None,
                     resume=None, unconditional=False, stop_after=None):
    """Stage two: train the object-centric model against the frozen tokenizer.

    `decoder` picks the denoising or mixture path. With `unconditional`
    the denoiser trains on zero slots (same architecture and budget), the
    ablation partner for conditioning comparisons. `stop_after` interrupts
    the session at that step for later resume. Returns
    (model, vq, history, meta).
    """
    apply_dtype(cfg)
    data = EpisodeData(cfg.data_dir, cfg.holdout)
    model = build_slot_model(cfg, decoder=decoder)
    vq, z_scale, vq_meta = (None, 1.0, {})
    sched = build_schedule(cfg.diff_t, cfg.beta_start, cfg.beta_end)
    if decoder == "diffusion":
        vq, z_scale, vq_meta = load_frozen_vqvae(cfg, vq_dir)
        digest_before = vq_param_digest(vq)
        if vq_meta.get("digest", digest_before) != digest_before:
            raise CheckpointMismatch("tokenizer checkpoint digest disagrees with its manifest")
    names = [name for name, _ in model.named_parameters()]
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed)
    start_step = 0
    if resume is not None:
        meta = load_model_checkpoint(resume, model, opt)
        if meta.get("config") != config_digest(cfg):
            raise CheckpointMismatch("resume checkpoint built from a different config")
        if decoder == "diffusion" and meta.get("vq_digest") != vq_meta.get("digest"):
            raise CheckpointMismatch("tokenizer hash mismatch on resume")
        start_step = int(meta["step"])
    end_step = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
    history = []
    eval_rows = []
    for step in range(start_step, end_step):
        rng_step = rng.stream(NS_STEP, step)
        if decoder == "mixture":
            x = sample_image_batch(data, cfg.batch, rng_step.stream(0))
            loss = train_mixture_step(model, x, rng_step.stream(1))
        elif unconditional:
            x = sample_image_batch(data, cfg.batch, rng_step.stream(0))
            with tt.no_grad():
                z0 = vq.encode(Tensor(x)).data / z_scale
            zero_slots = Tensor(np.zeros((x.shape[0], 1, cfg.d_slot),
                                         dtype=tt.default_dtype()))
            loss = denoise_loss(z0, zero_slots, sched, model.denoiser,
                                rng_step.stream(1))
        elif cfg.clip_len > 1:
            clip = sample_clip_batch(data, cfg.batch, cfg.clip_len, rng_step.stream(0))
            loss = train_clip_step(model, vq, z_scale, sched, clip, rng_step.stream(1))
        else:
            x = sample_image_batch(data, cfg.batch, rng_step.stream(0))
            loss = train_image_step(model, vq, z_scale, sched, x, rng_step.stream(1))
        value = loss.item()
        if not math.isfinite(value):
            raise NumericDivergence(f"loss non-finite at step {step}", step)
        tt.backward(loss)
        clip_grad_norm(model.parameters(), cfg.grad_clip)
        opt.step(lr_at(step, cfg))
        opt.zero_grad()
        history.append((step, value))
        if log and (step % 100 == 0 or step == end_step - 1):
            log(f"slot step {step} loss {value:.5f}")
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and not unconditional:
            scores = evaluate_segmentation(model, data, rng.stream(NS_EVAL, step))
            eval_rows.append((step + 1, scores["fg_ari"], scores["miou"], scores["mbo"]))
            if log:
                log(f"eval step {step + 1} fg_ari {scores['fg_ari']:.4f} "
                    f"miou {scores['miou']:.4f} mbo {scores['mbo']:.4f}")
    if decoder == "diffusion":
        digest_after = vq_param_digest(vq)
        if digest_after != digest_before:
            raise FrozenViolation("tokenizer parameters changed during slot training")
    meta = {
        "kind": f"slot-{decoder}" + ("-uncond" if unconditional else ""),
        "step": str(end_step), "config": config_digest(cfg), "dtype": cfg.dtype,
        "z_scale": repr(z_scale), "vq_digest": vq_meta.get("digest", ""),
    }
    out = Path(cfg.out_dir) / ("slot_uncond" if unconditional else "slot")
    save_model_checkpoint(out, model, opt, meta)
    _write_run_config(out, cfg)
    _write_history(out / "loss_curve.txt", history)
    if eval_rows:
        _write_history(out / "eval_curve.txt", eval_rows)
    return model, vq, history, meta


# -- evaluation --------------------------------------------------------------------------


def evaluate_segmentation(model: SlotModel, data: EpisodeData, rng: Rng,
                          video=None) -> dict:
    """fg_ari / miou / mbo means over the holdout split.

    Image datasets score per first frame; video datasets score flattened
    full episodes so identity swaps count against the model.
    """
    video = data.t_ep > 1 if video is None else video
    rows = []
    with tt.no_grad():
        for ep in data.holdout_episodes():
            if video:
                clip = frames_float(ep.frames)[None]
                traj = model.run_video(Tensor(clip), rng=rng)
                pred = flatten_video(traj.masks(data.size, data.size)[0])
                gt = flatten_video(ep.masks.astype(np.int64))
            else:
                x = frames_float(ep.frames[:1])
                pred = model.segment(Tensor(x), rng=rng)[0]
                gt = ep.masks[0].astype(np.int64)
            rows.append({
                "fg_ari": fg_ari(pred, gt, background_id=0),
                "miou": miou(pred, gt),
                "mbo": mbo(pred, gt),
            })
    return {key: float(np.mean([r[key] for r in rows])) for key in rows[0]} | {
        "per_sample": rows}


def reconstruct_images(model: SlotModel, vq: VqVae, z_scale, sched: NoiseSchedule,
                       images, rng: Rng, steps=20, ancestral=False):
    """Decode slot-conditioned samples back to pixels (B,3,H,W float)."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    with tt.no_grad():
        slots, _ = model.encode_slots(images)
        shape = vq.encode(images).data.shape
        if ancestral:
            z = sample(model.denoiser, slots, sched, shape, rng)
        else:
            z = fast_sample(model.denoiser, slots, sched, shape, rng, steps=steps)
        z = z * z_scale
        _, zq = vq.quantize(z.astype(tt.default_dtype()))
        return vq.decode(zq).data
