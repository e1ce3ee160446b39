"""Deterministic Euler ODE sampling with output-space classifier-free guidance.

Integration runs the learned velocity field from t=1 (noise) down to t=0
with uniform steps x <- x - dt * v(x, t). Each step evaluates conditional
and unconditional velocities and blends them with the guidance scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .codec import MiniVAE, destandardize
from .errors import NumericError
from .flow import NoisyState
from .seeding import torch_generator


@dataclass(frozen=True)
class SampleRequest:
    labels: Union[int, Sequence[int], None]  # None = unconditional (null class)
    batch_size: int
    num_steps: int = 50
    cfg_scale: float = 4.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def resolve_labels(self, num_classes: int) -> Tensor:
        null = num_classes
        if self.labels is None:
            return torch.full((self.batch_size,), null, dtype=torch.long)
        if isinstance(self.labels, int):
            values = [self.labels] * self.batch_size
        else:
            values = list(self.labels)
            if len(values) != self.batch_size:
                raise ValueError(
                    f"got {len(values)} labels for batch_size {self.batch_size}"
                )
        for v in values:
            if not 0 <= v <= null:
                raise ValueError(f"label {v} out of range [0, {null}]")
        return torch.tensor(values, dtype=torch.long)


def cfg_combine(v_u: Tensor, v_c: Tensor, omega_s: float) -> Tensor:
    """Blend v_u + omega_s * (v_c - v_u); exact at the omega_s in {0, 1} endpoints."""
    if v_u.shape != v_c.shape:
        raise ValueError(f"shape mismatch: {tuple(v_u.shape)} vs {tuple(v_c.shape)}")
    return (1.0 - omega_s) * v_u + omega_s * v_c


@torch.no_grad()
def euler_sample(model, req: SampleRequest) -> Tensor:
    """Integrate from seeded noise at t=1 down to t=0; returns latents.

    `model` must expose `config` and `velocity(x_t, t, labels)`.
    """
    cfg = model.config
    labels = req.resolve_labels(cfg.num_classes)
    null = torch.full_like(labels, cfg.null_class)
    gen = torch_generator(req.rng_seed)
    x = torch.randn(
        (req.batch_size, cfg.latent_channels, cfg.latent_size, cfg.latent_size),
        generator=gen,
    )
    dt = 1.0 / req.num_steps
    for k in range(req.num_steps):
        t = torch.full((req.batch_size,), 1.0 - k * dt)
        v_c = model.velocity(x, t, labels)
        v_u = model.velocity(x, t, null)
        x = x - dt * cfg_combine(v_u, v_c, req.cfg_scale)
        if not torch.isfinite(x).all():
            raise NumericError(f"sampler state became non-finite at step {k}")
    return x


@torch.no_grad()
def sample_images(
    model, codec: MiniVAE, latent_mu: Tensor, latent_sigma: Tensor, req: SampleRequest
) -> Tensor:
    """euler_sample, de-standardize with the codec statistics, decode to [-1, 1]."""
    if model.config.latent_channels != codec.config.latent_channels or (
        model.config.latent_size != codec.config.latent_size
    ):
        raise ValueError(
            f"model latent grid [{model.config.latent_channels}, {model.config.latent_size}] "
            f"does not match codec [{codec.config.latent_channels}, {codec.config.latent_size}]"
        )
    z = euler_sample(model, req)
    return codec.decode(destandardize(z, latent_mu, latent_sigma))


def to_uint8(images: Tensor) -> np.ndarray:
    """[-1, 1] float images to HWC uint8."""
    arr = ((images.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


def save_image_grid(
    images: Tensor,
    path: Union[str, Path],
    *,
    labels: Optional[Sequence[int]] = None,
    seed: Optional[int] = None,
    config_hash: str = "",
    columns: int = 0,
) -> Path:
    """Write a row-major 8-bit PNG grid plus a JSON sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(images)
    n, h, w, c = arr.shape
    cols = columns if columns > 0 else int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = arr[i]
    Image.fromarray(grid.squeeze() if c == 1 else grid).save(path, format="PNG")
    manifest = {
        "samples": n,
        "rows": rows,
        "columns": cols,
        "labels": list(int(v) for v in labels) if labels is not None else None,
        "seed": seed,
        "config_hash": config_hash,
        "image": path.name,
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def request_hash(req: SampleRequest, extra: str = "") -> str:
    payload = repr((req.labels, req.batch_size, req.num_steps, req.cfg_scale, req.rng_seed, extra))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
