from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule. Timesteps are 1-based: ``betas[t - 1]`` is beta_t."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def to(self, dtype: torch.dtype) -> NoiseSchedule:
        return NoiseSchedule(self.betas.to(dtype), self.alpha_bars.to(dtype))

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {"betas": self.betas, "alpha_bars": self.alpha_bars}

    @classmethod
    def from_state_dict(cls, state: dict[str, torch.Tensor]) -> NoiseSchedule:
        return cls(state["betas"], state["alpha_bars"])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas, alpha_bars)


def _check_t(t: torch.Tensor, T: int) -> None:
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > T):
        raise ValidationError(f"timestep outside [1, {T}]")


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if values.ndim == 0:
        return values.to(like.dtype)
    return values.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0): ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or a 1-D tensor of per-example timesteps (batch first).
    """
    if eps.shape != x0.shape:
        raise ValidationError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    _check_t(t, sched.T)
    abar = _broadcast(sched.alpha_bars[t - 1], x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps
