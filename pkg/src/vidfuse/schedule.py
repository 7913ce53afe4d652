"""Diffusion noise schedule and the deterministic DDIM forward/inverse steps.

The cumulative signal coefficients are computed once in float64 and kept in
float64; per-step scalar coefficients are cast to the latent dtype at the
point of use so round-trip error is dominated by the fp32 tensor ops, not by
schedule arithmetic.

Timestep conventions: training timesteps run 1..T_train, index 0 is the clean
latent with cumulative coefficient exactly 1. The DDIM sub-sequence
``step_indices`` holds the T_sample training timesteps visited by sampling, in
increasing order; the terminal denoise step pairs its lowest entry with
timestep 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NumericalError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int
    T_sample: int
    alpha_bar: torch.Tensor          # float64, length T_train + 1, alpha_bar[0] == 1
    step_indices: tuple[int, ...]    # strictly increasing, in [1, T_train]
    beta_min: float = field(default=1e-4)
    beta_max: float = field(default=0.02)

    def signal(self, t: int) -> float:
        """Cumulative signal coefficient at training timestep t (float64)."""
        if not 0 <= t <= self.T_train:
            raise ConfigError(f"timestep t={t} outside [0, {self.T_train}]")
        return float(self.alpha_bar[t])

    def sampling_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs for one denoising pass, noisiest first."""
        steps = (0,) + self.step_indices
        return [(steps[i], steps[i - 1]) for i in range(len(steps) - 1, 0, -1)]


def build_schedule(
    T_train: int = 1000,
    T_sample: int = 50,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
) -> NoiseSchedule:
    """Linear-beta schedule with an evenly spaced (floor-rounded) DDIM sub-sequence."""
    if T_train < 1:
        raise ConfigError(f"T_train must be >= 1, got {T_train}")
    if not 1 <= T_sample <= T_train:
        raise ConfigError(f"T_sample must be in [1, T_train={T_train}], got {T_sample}")
    if not 0.0 < beta_min <= beta_max:
        raise ConfigError(f"beta_min must satisfy 0 < beta_min <= beta_max, got {beta_min}")
    if beta_max >= 1.0:
        raise ConfigError(f"beta_max must be < 1, got {beta_max}")

    betas = torch.linspace(beta_min, beta_max, T_train, dtype=torch.float64)
    alpha_bar = torch.empty(T_train + 1, dtype=torch.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = torch.cumprod(1.0 - betas, dim=0)

    if T_sample == 1:
        indices = (T_train,)
    else:
        raw = torch.linspace(1.0, float(T_train), T_sample, dtype=torch.float64)
        indices = tuple(int(v) for v in torch.floor(raw))
    return NoiseSchedule(T_train, T_sample, alpha_bar, indices, beta_min, beta_max)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"latent/noise shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coeff(value: float, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(value, dtype=like.dtype, device=like.device)


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
    """Noisy sample at timestep t: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    _check_same_shape(z0, eps)
    if not 0 <= t <= schedule.T_train:
        raise ConfigError(f"t={t} outside [0, T_train={schedule.T_train}]")
    a = schedule.signal(t)
    return _coeff(a ** 0.5, z0) * z0 + _coeff((1.0 - a) ** 0.5, z0) * eps


def _validate_pair(schedule: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float]:
    members = set(schedule.step_indices) | {0}
    if t not in members or t_prev not in members:
        raise ConfigError(
            f"timesteps ({t}, {t_prev}) must be members of the DDIM sub-sequence or 0"
        )
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    a_t = schedule.signal(t)
    a_prev = schedule.signal(t_prev)
    if a_t == 0.0 or a_prev == 0.0:
        raise NumericalError(f"zero signal coefficient at (t={t}, t_prev={t_prev})")
    return a_t, a_prev


def ddim_step(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
) -> torch.Tensor:
    """One deterministic denoising step from timestep t down to t_prev."""
    _check_same_shape(z_t, eps)
    a_t, a_prev = _validate_pair(schedule, t, t_prev)
    z_coeff = (a_prev / a_t) ** 0.5
    eps_coeff = (1.0 - a_prev) ** 0.5 - (a_prev * (1.0 - a_t) / a_t) ** 0.5
    return _coeff(z_coeff, z_t) * z_t + _coeff(eps_coeff, z_t) * eps


def ddim_inverse_step(
    schedule: NoiseSchedule,
    z_prev: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
) -> torch.Tensor:
    """One deterministic noising step from timestep t_prev up to t.

    Exact algebraic inverse of :func:`ddim_step` when the same eps is supplied.
    """
    _check_same_shape(z_prev, eps)
    a_t, a_prev = _validate_pair(schedule, t, t_prev)
    z_coeff = (a_t / a_prev) ** 0.5
    eps_coeff = (1.0 - a_t) ** 0.5 - (a_t * (1.0 - a_prev) / a_prev) ** 0.5
    return _coeff(z_coeff, z_prev) * z_prev + _coeff(eps_coeff, z_prev) * eps
