"""Linear stochastic interpolant between latents and noise.

Convention: t=0 is clean data, t=1 is noise, and the path is the straight
line x_t = (1-t)*z + t*eps. The model predicts the path velocity
v = dx_t/dt = eps - z, trained with a plain MSE loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import NumericError
from .seeding import torch_generator


@dataclass(frozen=True)
class NoisyState:
    """An interpolated sample x_t with its per-sample timestep vector t."""

    x_t: Tensor
    t: Tensor

    def __post_init__(self) -> None:
        if self.x_t.ndim != 4:
            raise ValueError(f"x_t must be [B, C, H, W], got shape {tuple(self.x_t.shape)}")
        if self.t.ndim != 1 or self.t.shape[0] != self.x_t.shape[0]:
            raise ValueError(
                f"t must be a vector of length {self.x_t.shape[0]}, got shape {tuple(self.t.shape)}"
            )
        if not torch.isfinite(self.x_t).all():
            raise NumericError("x_t contains non-finite values")
        if self.t.numel() and (self.t.min() < 0.0 or self.t.max() > 1.0):
            raise ValueError("t must lie in [0, 1]")

    @property
    def batch_size(self) -> int:
        return self.x_t.shape[0]


def sample_timesteps(batch_size: int, rng_seed: int) -> Tensor:
    """Draw batch_size timesteps i.i.d. uniform on [0, 1], deterministic per seed."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size} (empty batch)")
    gen = torch_generator(rng_seed)
    return torch.rand(batch_size, generator=gen)


def forward_interpolate(z: Tensor, eps: Tensor, t: Tensor) -> NoisyState:
    """Interpolate x_t = (1-t)*z + t*eps with t broadcast per sample.

    t=0 reproduces z bit-exactly and t=1 reproduces eps bit-exactly.
    """
    if z.shape != eps.shape:
        raise ValueError(f"z and eps shapes differ: {tuple(z.shape)} vs {tuple(eps.shape)}")
    if t.ndim != 1 or t.shape[0] != z.shape[0]:
        raise ValueError(f"t must have shape [{z.shape[0]}], got {tuple(t.shape)}")
    tb = t.view(-1, 1, 1, 1)
    x_t = (1.0 - tb) * z + tb * eps
    return NoisyState(x_t=x_t, t=t)


def velocity_target(z: Tensor, eps: Tensor) -> Tensor:
    """Target velocity of the linear path: v = eps - z."""
    if z.shape != eps.shape:
        raise ValueError(f"z and eps shapes differ: {tuple(z.shape)} vs {tuple(eps.shape)}")
    return eps - z


def diffusion_loss(v_pred: Tensor, v_target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if v_pred.shape != v_target.shape:
        raise ValueError(
            f"prediction/target shapes differ: {tuple(v_pred.shape)} vs {tuple(v_target.shape)}"
        )
    if not (torch.isfinite(v_pred).all() and torch.isfinite(v_target).all()):
        raise NumericError("diffusion_loss received non-finite inputs")
    return torch.mean((v_pred - v_target) ** 2)
