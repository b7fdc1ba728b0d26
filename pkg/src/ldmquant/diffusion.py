"""Toy latent-diffusion harness: linear beta schedule, closed-form noising and
classifier-free-guidance ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_GUIDANCE = 7.5


@dataclass(frozen=True, eq=False)
class SchedulerConfig:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t-1]`` is the cumulative product of ``1 - beta`` up to step ``t``."""
        return np.cumprod(1.0 - self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_scheduler(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> SchedulerConfig:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return SchedulerConfig(betas)


def forward_diffuse(z0: np.ndarray, t: int, scheduler: SchedulerConfig, noise: np.ndarray) -> np.ndarray:
    """Closed-form ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; ``t = 0`` returns ``z0``."""
    if t == 0:
        return np.array(z0, dtype=np.float64)
    scheduler.check_step(t)
    abar = scheduler.alpha_bar_at(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * noise


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    # written as a convex-style blend so g=0 and g=1 reproduce their inputs exactly
    return (1.0 - guidance) * eps_uncond + guidance * eps_cond


def posterior_std(scheduler: SchedulerConfig, t: int) -> float:
    abar_t = scheduler.alpha_bar_at(t)
    abar_prev = scheduler.alpha_bar_at(t - 1)
    return float(np.sqrt(scheduler.beta(t) * (1.0 - abar_prev) / (1.0 - abar_t)))


def reverse_step(
    scheduler: SchedulerConfig,
    z_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral update ``z_t -> z_{t-1}``; the noise term is added only for ``t > 1``."""
    beta = scheduler.beta(t)
    coef = beta / np.sqrt(1.0 - scheduler.alpha_bar_at(t))
    z_prev = (z_t - coef * eps) / np.sqrt(1.0 - beta)
    if t > 1 and noise is not None:
        z_prev = z_prev + posterior_std(scheduler, t) * noise
    return z_prev


def initial_latent(rng: np.random.Generator, n: int, latent_shape) -> np.ndarray:
    return rng.standard_normal((n,) + tuple(latent_shape[1:]))


def step_noise(rng: np.random.Generator, t: int, shape) -> np.ndarray | None:
    return rng.standard_normal(shape) if t > 1 else None


def sample(
    model,
    scheduler: SchedulerConfig,
    guidance: float = DEFAULT_GUIDANCE,
    cond: np.ndarray | None = None,
    n: int = 1,
    seed: int = 0,
    trace: list | None = None,
) -> np.ndarray:
    """Run the reverse loop from seeded ``z_T`` down to ``z_0``.

    Args:
        model: ``ModuleGraph`` or ``QuantizedGraph`` (anything with ``forward`` and
            ``latent_shape``).
        scheduler: Noise schedule; ``T`` reverse steps are taken.
        guidance: Classifier-free guidance scale, must be ``>= 0``.
        cond: ``[n, cond_dim]`` condition. ``None`` samples unconditionally and
            ignores ``guidance``.
        n: Number of chains.
        seed: Seeds both ``z_T`` and the per-step noise.
        trace: If given, ``(t, z_t, eps_hat)`` is appended for every step.

    Returns:
        The final latent batch ``z_0``.
    """
    if guidance < 0:
        raise ValueError(f"guidance must be >= 0, got {guidance}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    z = initial_latent(rng, n, model.latent_shape)
    for t in range(scheduler.T, 0, -1):
        eps_u = model.forward(z, t, None)
        eps = eps_u if cond is None else guided_noise(model.forward(z, t, cond), eps_u, guidance)
        if trace is not None:
            trace.append((t, z, eps))
        z = reverse_step(scheduler, z, eps, t, step_noise(rng, t, z.shape))
    return z


@dataclass(frozen=True, eq=False)
class LatentBatch:
    z: np.ndarray
    t: int
    cond: np.ndarray | None
    seed: int

    @property
    def unconditional(self) -> bool:
        return self.cond is None


def gen_calibration_batches(
    scheduler: SchedulerConfig,
    steps: Iterable[int],
    n: int,
    seed: int,
    latent_shape,
) -> list[LatentBatch]:
    """Unconditional calibration latents, ``n`` per requested timestep.

    Each timestep draws from its own generator keyed by ``(seed, t)``, so the batch
    for a given step is the same whichever other steps are requested.
    """
    steps = sorted(set(int(t) for t in steps))
    if not steps:
        raise ValueError("calibration step set is empty")
    if n < 1:
        raise ValueError(f"need at least one calibration sample, got {n}")
    batches = []
    for t in steps:
        scheduler.check_step(t)
        rng = np.random.default_rng([seed, t])
        z0 = initial_latent(rng, n, latent_shape)
        noise = rng.standard_normal(z0.shape)
        batches.append(LatentBatch(forward_diffuse(z0, t, scheduler, noise), t, None, seed))
    return batches


def make_condition(n: int, cond_dim: int, seed: int) -> np.ndarray:
    """Seeded stand-in for prompt embeddings."""
    return np.random.default_rng([seed, 0xC0]).standard_normal((n, cond_dim))
