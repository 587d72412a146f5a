"""Flat key=value run configuration.

One text file drives every training command. Unknown keys are rejected;
values are validated by type on load. `dtype` switches the whole run
between float32 and float64 (the reproducibility mode).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_dir: str = ""
    clip_len: int = 1
    holdout: int = 32
    # model
    n_slots: int = 5
    d_slot: int = 192
    d_enc: int = 64
    enc_width: int = 64
    sa_iters: int = 3
    sigma_init: float = 0.0
    # U-Net
    unet_width: int = 64
    unet_mults: str = "1,2,2"
    unet_attn_levels: str = "1,2"
    unet_time_dim: int = 128
    unet_heads: int = 4
    # tokenizer
    vq_width: int = 64
    vq_dim: int = 3
    vq_codebook: int = 512
    vq_commit: float = 0.25
    # diffusion
    diff_t: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 20
    # training
    lr: float = 3e-4
    warmup: int = 200
    steps: int = 5000
    batch: int = 16
    grad_clip: float = 1.0
    eval_every: int = 0
    # run
    seed: int = 0
    out_dir: str = "runs/out"
    dtype: str = "f32"

    def ints(self, key: str) -> tuple:
        raw = getattr(self, key).strip()
        if not raw:
            return ()
        try:
            return tuple(int(p) for p in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"{key} must be comma-separated ints, got {raw!r}") from exc

    def validate(self):
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        for key in ("clip_len", "n_slots", "d_slot", "d_enc", "enc_width", "sa_iters",
                    "unet_width", "unet_time_dim", "unet_heads", "vq_width", "vq_dim",
                    "vq_codebook", "diff_t", "sample_steps", "steps", "batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.sample_steps > self.diff_t:
            raise ConfigError("sample_steps cannot exceed diff_t")
        self.ints("unet_mults")
        self.ints("unet_attn_levels")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_CASTERS = {"int": int, "float": float, "str": str}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys reject."""
    cfg = RunConfig()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        caster = _CASTERS[_FIELDS[key]]
        try:
            setattr(cfg, key, caster(value))
        except ValueError as exc:
            raise ConfigError(f"line {ln}: bad value for {key}: {value!r}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)) + "\n"
