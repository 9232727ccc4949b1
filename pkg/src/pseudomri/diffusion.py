"""Noise schedule, closed-form forward noising and deterministic DDIM stepping.

Step indices follow the 1-based convention ``t in [1, T]``; index 0 denotes the
clean latent, with ``alpha_bar(0) == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import torch

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValueError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, 0))

    @property
    def total_steps(self) -> int:
        return int(self.betas.numel())

    def alpha_bar(self, t: StepIndex) -> torch.Tensor:
        """``alpha_bar`` at step ``t`` (scalar or tensor), with ``alpha_bar(0) = 1``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t > self.total_steps)).any()):
            raise IndexError(f"step index out of range [0, {self.total_steps}]: {t.tolist()}")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])
        return padded[t]


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64))


def _coef(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # per-sample coefficients broadcast over the trailing (C, H, W) dims
    values = values.to(like.dtype)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _check_step(t: StepIndex, sched: NoiseSchedule, lowest: int = 1) -> None:
    tt = torch.as_tensor(t)
    if bool(((tt < lowest) | (tt > sched.total_steps)).any()):
        raise IndexError(f"step index {tt.tolist()} outside [{lowest}, {sched.total_steps}]")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0: torch.Tensor, t: StepIndex, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample ``z_t ~ q(z_t | z_0)`` in closed form using the supplied unit-Gaussian ``eps``."""
    _check_shapes(z0, eps)
    _check_step(t, sched)
    ab = sched.alpha_bar(t)
    return _coef(ab.sqrt(), z0) * z0 + _coef((1.0 - ab).sqrt(), z0) * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: StepIndex, sched: NoiseSchedule) -> torch.Tensor:
    _check_shapes(z_t, eps_hat)
    _check_step(t, sched)
    ab = sched.alpha_bar(t)
    return (z_t - _coef((1.0 - ab).sqrt(), z_t) * eps_hat) / _coef(ab.sqrt(), z_t)


def ddim_step(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
    clip_x0: Optional[float] = None,
) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev < t``.

    With ``clip_x0`` the predicted clean latent is clamped to ``[-clip_x0, clip_x0]`` and the
    noise estimate is re-derived from it, so both terms stay consistent.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"DDIM step requires 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(z_t, eps_hat, t, sched)
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
        ab = sched.alpha_bar(t)
        eps_hat = (z_t - _coef(ab.sqrt(), z_t) * x0) / _coef((1.0 - ab).sqrt(), z_t)
    ab_prev = sched.alpha_bar(t_prev)
    return _coef(ab_prev.sqrt(), z_t) * x0 + _coef((1.0 - ab_prev).sqrt(), z_t) * eps_hat


def uniform_step_indices(T: int, steps: int) -> list[int]:
    """``steps`` descending timesteps spread uniformly over ``[1, T]``, starting at ``T``."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    idx = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(i) for i in idx]


def ddim_sample(
    denoiser: Callable[[torch.Tensor, int, object], torch.Tensor],
    z_start: torch.Tensor,
    conditioning: object,
    step_indices: Sequence[int],
    sched: NoiseSchedule,
    clip_x0: Optional[float] = None,
) -> torch.Tensor:
    """Fold ``ddim_step`` over descending ``step_indices``; the last entry steps to 0.

    ``denoiser(z, t, conditioning)`` returns the predicted noise for ``z`` at step ``t``.
    """
    steps = [int(s) for s in step_indices]
    if not steps:
        raise ValueError("step_indices must not be empty")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError("step_indices must be strictly decreasing")
    z = z_start
    for t, t_prev in zip(steps, steps[1:] + [0]):
        z = ddim_step(z, denoiser(z, t, conditioning), t, t_prev, sched, clip_x0)
    return z


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    _check_shapes(eps, eps_hat)
    return torch.mean((eps - eps_hat) ** 2)


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, torch.Tensor]

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_module(cls, module: torch.nn.Module, decay: float) -> "EmaState":
        return cls(decay, {k: p.detach().clone() for k, p in module.named_parameters()})

    def copy_to(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])


@torch.no_grad()
def ema_update(state: EmaState, params: Mapping[str, torch.Tensor] | torch.nn.Module) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params``, in place."""
    if isinstance(params, torch.nn.Module):
        params = dict(params.named_parameters())
    if params.keys() != state.shadow.keys():
        raise ValueError("EMA parameter names do not match the tracked set")
    for name, value in params.items():
        shadow = state.shadow[name]
        _check_shapes(shadow, value)
        shadow.mul_(state.decay).add_(value.detach().to(shadow.dtype), alpha=1.0 - state.decay)
    return state
