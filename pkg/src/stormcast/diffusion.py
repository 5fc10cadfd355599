"""Denoising-diffusion machinery: schedule, forward/reverse steps, DDIM, loss.

Arrays here are plain numpy; sampling needs no gradients. Only the training
loss builds engine tensors so the denoiser's parameters receive gradients.
Step indices follow the 1-based convention t in [1, T], with the convention
alpha_bar(0) = 1 (the clean-data endpoint).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import tensor_engine as te
from .errors import ContractError, NumericalError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels; all arrays are indexed t-1 for t in 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal fraction, with the t=0 endpoint defined as 1."""
        if not 0 <= t <= self.T:
            raise ContractError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


@dataclass
class DiffusionState:
    """A noisy frame partway along the chain."""

    x_t: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ContractError(f"negative diffusion step {self.t}")
        if not np.all(np.isfinite(self.x_t)):
            raise NumericalError("diffusion state contains non-finite values")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp; sigma_t^2 is the posterior variance
    ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t."""
    if T < 2:
        raise ContractError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ContractError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _check_step(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ContractError(f"step {t} outside [1, {sched.T}]")


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Jump straight to x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_step(t, sched)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One ancestral step; the noise term sigma_t * z is dropped at t = 1."""
    _check_step(t, sched)
    i = t - 1
    mean = (x_t - sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) / np.sqrt(
        sched.alpha[i]
    )
    if t == 1 or z is None:
        return mean
    return mean + sched.sigma[i] * z


def ddim_time_subsequence(T: int, n_steps: int) -> List[int]:
    """Descending steps from T to 1, as evenly spaced as integers allow.

    n_steps = T yields every step; n_steps = 1 yields [T]. The final update
    always lands on t_prev = 0 (clean data).
    """
    if not 1 <= n_steps <= T:
        raise ContractError(f"n_steps must lie in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(T, 1, n_steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def ddim_sample(
    x_T: np.ndarray,
    n_steps: int,
    denoiser: Callable[[np.ndarray, int, object], np.ndarray],
    cond: object,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Deterministic (eta = 0) sampler.

    Per step: x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), then
    x_{t_prev} = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps_hat. The
    return value is x0_hat of the final step (t_prev = 0).
    """
    ts = ddim_time_subsequence(sched.T, n_steps)
    state = DiffusionState(np.asarray(x_T), ts[0])
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = denoiser(state.x_t, t, cond)
        ab = sched.alpha_bar_at(t)
        ab_prev = sched.alpha_bar_at(t_prev)
        x0_hat = (state.x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        state = DiffusionState(
            np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat, t_prev
        )
    return state.x_t


def diffusion_loss(
    x0,
    denoiser: Callable[[te.Tensor, int, object], te.Tensor],
    cond: object,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> te.Tensor:
    """Noise-prediction objective: draw t and eps, return mean (eps - eps_hat)^2.

    Differentiable through the denoiser always; also through x0 (via the
    corrupted input x_t) when x0 is passed as an engine tensor rather than an
    array, so callers choose whether the clean target carries gradients.
    """
    grad_through_x0 = isinstance(x0, te.Tensor)
    x0_data = x0.data if grad_through_x0 else np.asarray(x0)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(x0_data.shape)
    if grad_through_x0:
        ab = sched.alpha_bar_at(t)
        x_t = te.add(te.scale(x0, np.sqrt(ab)), te.Tensor(np.sqrt(1.0 - ab) * eps))
    else:
        x_t = te.Tensor(forward_sample(x0_data, t, eps, sched))
    eps_hat = denoiser(x_t, t, cond)
    if eps_hat.shape != x0_data.shape:
        raise ContractError(f"denoiser returned shape {eps_hat.shape}, expected {x0_data.shape}")
    diff = te.sub(te.Tensor(eps), eps_hat)
    return te.mean(te.mul(diff, diff))
