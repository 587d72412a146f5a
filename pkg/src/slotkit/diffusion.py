"""Noise schedule, forward process, denoising loss, and samplers.

The forward chain q(z_t | z_0) has the closed form
    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps,
with abar the running product of alpha_t = 1 - beta_t. The default
schedule interpolates beta linearly from 1e-4 to 0.02 over T=1000 steps.

Sampling reverses the chain. `sample` is stochastic ancestral sampling
with fixed variance beta_t; `fast_sample` is the deterministic coarse-grid
sampler that re-noises a clean estimate onto an evenly spaced sub-grid of
timesteps (the zero-noise limit), 20 steps by default.

Schedule tables are float64; timestep indexing is 1-based (t in 1..T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .rng import Rng
from .tensor import ContractError, Tensor


class SamplingError(RuntimeError):
    """Non-finite value during sampling; carries the failing timestep."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables; index 0 corresponds to t=1."""

    T: int
    beta: np.ndarray        # (T,) float64, nondecreasing, in (0,1)
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # running products of alpha

    def abar(self, t):
        """alpha_bar at 1-based step(s) t."""
        return self.alpha_bar[np.asarray(t) - 1]


def build_schedule(T=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 1:
        raise ContractError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    # explicit recurrence so alpha_bar[t] == alpha_bar[t-1] * alpha[t] bitwise
    alpha_bar = np.empty(T, dtype=np.float64)
    running = 1.0
    for i in range(T):
        running = running * alpha[i]
        alpha_bar[i] = running
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, T):
    t = np.asarray(t)
    if t.size == 0 or (t < 1).any() or (t > T).any():
        raise ContractError(f"timestep {t} outside 1..{T}")
    return t


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """Closed-form draw from q(z_t | z_0) given the noise eps."""
    t = _check_t(t, sched.T)
    abar = sched.abar(t)
    if t.ndim == 1:  # per-batch timesteps
        abar = abar.reshape((-1,) + (1,) * (np.ndim(eps) - 1))
    c_signal = np.sqrt(abar)
    c_noise = np.sqrt(1.0 - abar)
    if isinstance(z0, Tensor):
        dt = z0.dtype
        return z0 * Tensor(c_signal.astype(dt)) + Tensor((c_noise * eps).astype(dt))
    return c_signal * z0 + c_noise * eps


def denoise_loss(z0, slots, sched: NoiseSchedule, denoiser, rng: Rng):
    """Noise-prediction loss: mean over batch and latent elements of
    (eps - denoiser(z_t, t, slots))^2, with t uniform on {1..T} per sample."""
    z0d = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    b = z0d.shape[0]
    t = rng.integers(1, sched.T + 1, (b,))
    eps = rng.normal(z0d.shape).astype(z0d.dtype)
    zt = q_sample(z0d, t, eps, sched).astype(z0d.dtype)
    eps_hat = denoiser(Tensor(zt), t, slots)
    diff = eps_hat - Tensor(eps)
    return (diff * diff).mean()


def ancestral_step(zt, t: int, eps_hat, sched: NoiseSchedule, rng: Rng):
    """One reverse transition z_t -> z_{t-1} with fixed variance beta_t.

    Mean is reconstructed from the predicted noise; at t=1 no noise is
    injected, making the final step deterministic.
    """
    _check_t(t, sched.T)
    beta = float(sched.beta[t - 1])
    alpha = float(sched.alpha[t - 1])
    abar = float(sched.alpha_bar[t - 1])
    mu = (zt - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mu
    return mu + np.sqrt(beta) * rng.normal(np.shape(zt)).astype(np.asarray(zt).dtype)


def sample(denoiser, slots, sched: NoiseSchedule, shape, rng: Rng):
    """Full ancestral sampling from z_T ~ N(0, I) down to z_0."""
    z = rng.normal(shape)
    with tt.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = _eps_of(denoiser, z, t, slots)
            z = ancestral_step(z, t, eps_hat, sched, rng)
            if not np.isfinite(z).all():
                raise SamplingError(f"non-finite sample at t={t}", step=t)
    return z


def fast_sample(denoiser, slots, sched: NoiseSchedule, shape, rng: Rng, steps=20):
    """Deterministic coarse-grid sampling over `steps` evenly spaced timesteps.

    At each grid point the clean estimate
        z0_hat = (z_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t)
    is re-noised to the next grid point using the predicted noise only
    (no fresh randomness after the initial z_T draw). steps == T visits
    every timestep.
    """
    if not 1 <= steps <= sched.T:
        raise ContractError(f"steps {steps} outside 1..{sched.T}")
    if steps == 1:
        grid = [sched.T]
    else:
        grid = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))[::-1].tolist()
    z = rng.normal(shape)
    with tt.no_grad():
        for i, t in enumerate(grid):
            eps_hat = _eps_of(denoiser, z, t, slots)
            abar_t = float(sched.alpha_bar[t - 1])
            z0_hat = (z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
            s = grid[i + 1] if i + 1 < len(grid) else 0
            abar_s = float(sched.alpha_bar[s - 1]) if s >= 1 else 1.0
            z = np.sqrt(abar_s) * z0_hat + np.sqrt(1.0 - abar_s) * eps_hat
            if not np.isfinite(z).all():
                raise SamplingError(f"non-finite sample at t={t}", step=t)
    return z


def _eps_of(denoiser, z, t: int, slots):
    b = z.shape[0]
    out = denoiser(Tensor(np.asarray(z, dtype=tt.default_dtype())),
                   np.full(b, t, dtype=np.int64), slots)
    return out.data if isinstance(out, Tensor) else np.asarray(out)
