"""Operator command line.

Commands cover the whole workflow: synthesize data, pre-train the
tokenizer, train the slot model (denoising or mixture decoder), evaluate,
build concept libraries, compose novel scenes, and sweep the diffusion
step count. Every command is deterministic given (config, seed); report
paths receive key=value text, per-sample tables, and matplotlib figures.

Exit codes: 0 ok, 2 usage/config, 3 numeric divergence, 4 checkpoint
mismatch, 5 frozen-contract violation, 6 composition rejection.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click
import numpy as np

from . import concepts, plotting, report, sdt
from . import tensor as tt
from .config import ConfigError, load_config
from .datagen import SceneConfig, GenerationError, frames_float, write_dataset
from .diffusion import build_schedule, fast_sample
from .metrics import mse_metric
from .rng import Rng
from .tensor import Tensor
from . import train as training

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_FROZEN = 5
EXIT_COMPOSE = 6

VALID_METRICS = ("fg_ari", "miou", "mbo", "mse")


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


@click.group()
def main():
    """Slot-based object discovery with a latent-denoising decoder."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", required=True, type=int)
@click.option("--seed", required=True, type=int)
@click.option("--video", is_flag=True, help="6-frame moving episodes instead of stills")
@click.option("--size", default=64, show_default=True)
@click.option("--min-objects", default=1, show_default=True)
@click.option("--max-objects", default=5, show_default=True)
@click.option("--background", default="checker", show_default=True,
              type=click.Choice(["flat", "checker", "noise"]))
@click.option("--palette-size", default=8, show_default=True)
def gen_data(out_dir, count, seed, video, size, min_objects, max_objects,
             background, palette_size):
    """Write a deterministic synthetic dataset."""
    cfg = SceneConfig(size=size, min_objects=min_objects, max_objects=max_objects,
                      background=background, palette_size=palette_size,
                      t_ep=6 if video else 1,
                      vel_min=0.5 if video else 0.0, vel_max=1.5 if video else 0.0)
    try:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        probe = target / ".write_probe"
        probe.write_text("")
        probe.unlink()
        write_dataset(target, count, cfg, seed)
    except (OSError, GenerationError) as exc:
        _fail(EXIT_CONFIG, f"cannot generate dataset: {exc}")
    click.echo(f"wrote {count} episodes to {out_dir}")


@main.command("train-vqvae")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--resume", default=None, type=click.Path())
def train_vqvae_cmd(config_path, resume):
    """Pre-train the image tokenizer; checkpoint is frozen afterwards."""
    cfg = _load_config(config_path)
    if not Path(cfg.data_dir, "manifest.txt").is_file():
        _fail(EXIT_CONFIG, f"dataset not found under {cfg.data_dir!r}")
    try:
        _, history, _ = training.train_vqvae(cfg, log=click.echo, resume=resume)
    except training.NumericDivergence as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except training.CheckpointMismatch as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    out = Path(cfg.out_dir) / "vqvae"
    plotting.save_loss_curve(history, out / "loss_curve.png", title="tokenizer loss")
    click.echo(f"tokenizer checkpoint at {out}")


@main.command("train-slotdiffusion")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--vqvae", "vq_dir", default=None, type=click.Path(),
              help="frozen tokenizer checkpoint (diffusion decoder)")
@click.option("--decoder", default="diffusion", show_default=True,
              type=click.Choice(["diffusion", "mixture"]))
@click.option("--resume", default=None, type=click.Path())
@click.option("--unconditional", is_flag=True,
              help="train the zero-slot ablation of the denoiser")
def train_slotdiffusion_cmd(config_path, vq_dir, decoder, resume, unconditional):
    """Train the slot model against the frozen tokenizer."""
    cfg = _load_config(config_path)
    if not Path(cfg.data_dir, "manifest.txt").is_file():
        _fail(EXIT_CONFIG, f"dataset not found under {cfg.data_dir!r}")
    if decoder == "diffusion":
        if vq_dir is None or not Path(vq_dir, "manifest.txt").is_file():
            _fail(EXIT_CONFIG, "diffusion decoder needs --vqvae CKPT")
    try:
        _, _, history, _ = training.train_slot_model(
            cfg, vq_dir, decoder=decoder, log=click.echo, resume=resume,
            unconditional=unconditional)
    except training.NumericDivergence as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except training.CheckpointMismatch as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except training.FrozenViolation as exc:
        _fail(EXIT_FROZEN, str(exc))
    out = Path(cfg.out_dir) / ("slot_uncond" if unconditional else "slot")
    plotting.save_loss_curve(history, out / "loss_curve.png", title="denoising loss")
    click.echo(f"slot model checkpoint at {out}")


def _load_slot_run(ckpt, data_dir=None):
    """Rebuild a slot model (and its tokenizer) from checkpoint metadata."""
    entries, meta = sdt.load_checkpoint(ckpt)
    run_cfg_path = Path(ckpt) / "run_config.txt"
    if not run_cfg_path.is_file():
        raise training.CheckpointMismatch(f"{ckpt} has no run_config.txt")
    cfg = load_config(run_cfg_path)
    if data_dir:
        cfg.data_dir = str(data_dir)
    training.apply_dtype(cfg)
    decoder = "mixture" if meta.get("kind", "").startswith("slot-mixture") else "diffusion"
    model = training.build_slot_model(cfg, decoder=decoder)
    model.load_state(entries)
    vq, z_scale = None, float(meta.get("z_scale", 1.0))
    vq_dir = Path(ckpt).parent / "vqvae"
    if vq_dir.is_dir():
        vq, z_scale, _ = training.load_frozen_vqvae(cfg, vq_dir)
    return model, vq, z_scale, cfg, meta


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--metrics", "metric_names", default="fg_ari,miou,mbo", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def eval_cmd(ckpt, data_dir, metric_names, out_path, seed):
    """Score a checkpoint on a dataset's holdout split."""
    names = [n.strip() for n in metric_names.split(",") if n.strip()]
    bad = [n for n in names if n not in VALID_METRICS]
    if bad:
        _fail(EXIT_CONFIG, f"unknown metrics {bad}; valid names: {', '.join(VALID_METRICS)}")
    try:
        model, vq, z_scale, cfg, meta = _load_slot_run(ckpt, data_dir)
    except (training.CheckpointMismatch, sdt.FormatError, ConfigError) as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    data = training.EpisodeData(data_dir, cfg.holdout)
    rng = Rng(seed)
    scores = training.evaluate_segmentation(model, data, rng.stream(0))
    per_sample = scores.pop("per_sample")
    summary = {k: v for k, v in scores.items() if k in names}
    if "mse" in names:
        if vq is None:
            _fail(EXIT_CONFIG, "mse metric needs the tokenizer checkpoint next to the model")
        sched = build_schedule(cfg.diff_t, cfg.beta_start, cfg.beta_end)
        frames = np.stack([ep.frames[0] for ep in data.holdout_episodes()])
        x = frames_float(frames)
        decoded = training.reconstruct_images(model, vq, z_scale, sched, x,
                                              rng.stream(1), steps=cfg.sample_steps)
        summary["mse"] = mse_metric(x, np.clip(decoded, 0.0, 1.0))
    seg_names = [n for n in names if n != "mse"]
    out_path = Path(out_path) if out_path else Path(ckpt) / "eval_report.txt"
    report.write_report(out_path, summary,
                        per_sample=[{k: r[k] for k in seg_names} for r in per_sample]
                        if seg_names else None,
                        columns=seg_names or None)
    plotting.save_metric_bars(summary, out_path.with_suffix(".png"),
                              title="holdout metrics")
    for key, value in summary.items():
        click.echo(f"{key}={value}")


@main.command("build-library")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--k", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def build_library_cmd(ckpt, data_dir, k, out_dir, seed):
    """Cluster training-split slots into a concept library."""
    try:
        model, _, _, cfg, _ = _load_slot_run(ckpt, data_dir)
    except (training.CheckpointMismatch, sdt.FormatError, ConfigError) as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    data = training.EpisodeData(data_dir, cfg.holdout)
    slot_sets = []
    with tt.no_grad():
        for i in range(data.n_train):
            x = Tensor(data.train_images([i]))
            slots, attn = model.encode_slots(x)
            slot_sets.append((slots.data[0], attn.data[0]))
    lib = concepts.build_library(slot_sets, k, seed=seed)
    concepts.save_library(lib, out_dir)
    click.echo(f"library with clusters of sizes {lib.cluster_sizes()} at {out_dir}")


@main.command("compose")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--library", "lib_dir", required=True, type=click.Path())
@click.option("--picks", required=True, help="comma-separated cluster ids")
@click.option("--steps", default=20, show_default=True, type=int)
@click.option("--seed", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--threshold", default=0.1, show_default=True, type=float)
@click.option("--unroll", default=1, show_default=True, type=int,
              help="decode this many frames, advancing slots with the predictor")
def compose_cmd(ckpt, lib_dir, picks, steps, seed, out_path, threshold, unroll):
    """Decode a novel scene from sampled concept slots."""
    try:
        pick_ids = [int(p) for p in picks.split(",") if p.strip()]
        if not pick_ids:
            raise ValueError("empty picks")
    except ValueError as exc:
        _fail(EXIT_CONFIG, f"bad --picks {picks!r}: {exc}")
    try:
        model, vq, z_scale, cfg, _ = _load_slot_run(ckpt)
    except (training.CheckpointMismatch, sdt.FormatError, ConfigError) as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    if vq is None:
        _fail(EXIT_CHECKPOINT, "compose needs the tokenizer checkpoint next to the model")
    lib = concepts.load_library(lib_dir)
    try:
        comp = concepts.compose(lib, pick_ids, threshold=threshold, seed=seed)
    except concepts.CompositionError as exc:
        _fail(EXIT_COMPOSE, str(exc))
    except tt.ContractError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if unroll < 1:
        _fail(EXIT_CONFIG, "--unroll must be >= 1")
    sched = build_schedule(cfg.diff_t, cfg.beta_start, cfg.beta_end)
    slots = Tensor(comp.slots[None].astype(tt.default_dtype()))
    hw = model.image_hw // 4
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with tt.no_grad():
        for frame in range(unroll):
            z = fast_sample(model.denoiser, slots, sched, (1, cfg.vq_dim, hw, hw),
                            Rng(seed).stream(1, frame), steps=steps)
            _, zq = vq.quantize((z * z_scale).astype(tt.default_dtype()))
            decoded = vq.decode(zq).data[0]
            suffix = f".f{frame}" if unroll > 1 else ""
            sdt.write_tensor(out_path.with_suffix(suffix + ".sdt"),
                             (np.clip(decoded, 0, 1) * 255 + 0.5).astype(np.uint8))
            report.write_ppm(out_path.with_suffix(suffix + ".ppm"), decoded)
            if frame + 1 < unroll:
                slots = model.predictor(slots)
    masks = np.stack([m.mask for m in
                      (lib.members[c][m_id] for c, m_id in comp.provenance)])
    sdt.write_tensor(out_path.with_suffix(".masks.sdt"), masks.astype(np.uint8))
    click.echo(f"composed {comp.provenance} -> {out_path.with_suffix('.ppm')}"
               + (f" ({unroll} frames)" if unroll > 1 else ""))


@main.command("ablate-steps")
@click.option("--ckpt", required=True, type=click.Path(),
              help="frozen tokenizer checkpoint reused across sweep points")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--t-list", "t_list", required=True)
@click.option("--config", "config_path", required=True, type=click.Path())
def ablate_steps_cmd(ckpt, data_dir, t_list, config_path):
    """Short training run per diffusion step count; reports the sweep table."""
    try:
        ts = [int(p) for p in t_list.split(",") if p.strip()]
        if not ts or any(t < 1 for t in ts):
            raise ValueError("need positive step counts")
    except ValueError as exc:
        _fail(EXIT_CONFIG, f"bad --T-list {t_list!r}: {exc}")
    base = _load_config(config_path)
    base.data_dir = str(data_dir)
    rows = []
    for t in ts:
        cfg = dataclasses.replace(base, diff_t=t,
                                  sample_steps=min(base.sample_steps, t),
                                  out_dir=str(Path(base.out_dir) / f"ablate_T{t}"))
        try:
            model, vq, _, _ = training.train_slot_model(cfg, ckpt, log=None)
        except training.NumericDivergence as exc:
            _fail(EXIT_NUMERIC, str(exc))
        except (training.CheckpointMismatch, sdt.FormatError) as exc:
            _fail(EXIT_CHECKPOINT, str(exc))
        data = training.EpisodeData(data_dir, cfg.holdout)
        scores = training.evaluate_segmentation(model, data, Rng(cfg.seed).stream(9))
        sched = build_schedule(t, cfg.beta_start, cfg.beta_end)
        frames = np.stack([ep.frames[0] for ep in data.holdout_episodes()])
        x = frames_float(frames)
        z_scale = float(sdt.load_checkpoint(ckpt)[1]["z_scale"])
        decoded = training.reconstruct_images(model, vq, z_scale, sched, x,
                                              Rng(cfg.seed).stream(10),
                                              steps=cfg.sample_steps)
        mse = mse_metric(x, np.clip(decoded, 0.0, 1.0))
        rows.append((t, mse, scores["fg_ari"], scores["miou"]))
        click.echo(f"T={t} mse={mse:.4f} fg_ari={scores['fg_ari']:.4f} "
                   f"miou={scores['miou']:.4f}")
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["T\tmse\tfg_ari\tmiou"] + [
        "\t".join(str(v) for v in row) for row in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    plotting.save_ablation_curves(rows, out / "ablation.png")
    click.echo(f"sweep table at {out / 'ablation.tsv'}")


if __name__ == "__main__":
    main()
