"""Small trainable convolutional VAE supplying the diffusion latent space.

The encoder downsamples images to a compact latent grid; the decoder maps
latents back to [-1, 1] images through a tanh. Latents are standardized
per channel (statistics computed over the training set and stored with the
checkpoint) before they are used as the diffusion substrate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import torch
import torch.nn as nn
from torch import Tensor

from .errors import NumericError
from .seeding import derive_seed, torch_generator


@dataclass(frozen=True)
class CodecConfig:
    image_size: int = 32
    image_channels: int = 3
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 1e-4

    def __post_init__(self) -> None:
        if self.image_size % self.downsample_factor != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"downsample_factor {self.downsample_factor}"
            )
        if self.downsample_factor & (self.downsample_factor - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {self.downsample_factor}")
        if self.kl_weight < 0:
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class MiniVAE(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        c, cz = config.base_channels, config.latent_channels
        stages = config.downsample_factor.bit_length() - 1

        enc: list[nn.Module] = [nn.Conv2d(config.image_channels, c, 3, padding=1), _gn(c), nn.SiLU()]
        ch = c
        for _ in range(stages):
            enc += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _gn(ch * 2), nn.SiLU()]
            ch *= 2
        enc += [nn.Conv2d(ch, 2 * cz, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(cz, ch, 3, padding=1), _gn(ch), nn.SiLU()]
        for _ in range(stages):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1),
                _gn(ch // 2),
                nn.SiLU(),
            ]
            ch //= 2
        dec += [nn.Conv2d(ch, config.image_channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(
        self, images: Tensor, rng_seed: Optional[int] = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Return (mean, logvar, z_sample). With rng_seed=None, z_sample is the mean."""
        cfg = self.config
        if images.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"images shape {tuple(images.shape)} incompatible with codec config "
                f"[{cfg.image_channels}, {cfg.image_size}, {cfg.image_size}]"
            )
        if not torch.isfinite(images).all():
            raise NumericError("encode received non-finite images")
        mean, logvar = self.encoder(images).chunk(2, dim=1)
        logvar = logvar.clamp(-10.0, 10.0)
        if rng_seed is None:
            return mean, logvar, mean
        eta = torch.randn(mean.shape, generator=torch_generator(rng_seed))
        return mean, logvar, mean + torch.exp(0.5 * logvar) * eta

    def decode(self, z: Tensor) -> Tensor:
        cfg = self.config
        if z.shape[1:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ValueError(
                f"latent shape {tuple(z.shape)} incompatible with codec config "
                f"[{cfg.latent_channels}, {cfg.latent_size}, {cfg.latent_size}]"
            )
        return self.decoder(z)


def codec_loss(
    images: Tensor, mean: Tensor, logvar: Tensor, recon: Tensor, kl_weight: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Standard VAE objective: (total, recon_term, kl_term).

    recon_term is the MSE of the reconstruction; kl_term is the mean KL to a
    unit Gaussian, 0.5*mean(exp(logvar) + mean^2 - 1 - logvar).
    """
    if recon.shape != images.shape:
        raise ValueError(f"recon shape {tuple(recon.shape)} != images shape {tuple(images.shape)}")
    for name, t in (("images", images), ("mean", mean), ("logvar", logvar), ("recon", recon)):
        if not torch.isfinite(t).all():
            raise NumericError(f"codec_loss received non-finite {name}")
    recon_term = torch.mean((recon - images) ** 2)
    kl_term = 0.5 * torch.mean(torch.exp(logvar) + mean**2 - 1.0 - logvar)
    total = recon_term + kl_weight * kl_term
    return total, recon_term, kl_term


def build_codec(config: CodecConfig, seed: int) -> MiniVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        codec = MiniVAE(config)
    return codec


def train_codec(
    images: Tensor,
    config: CodecConfig,
    steps: int,
    rng_seed: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    log_path: Optional[Path] = None,
) -> tuple[MiniVAE, Tensor, Tensor]:
    """Train the codec and return (codec, latent_mu, latent_sigma).

    latent_mu/latent_sigma are per-channel standardization statistics of the
    posterior means over the full training set. Deterministic under seed when
    torch runs single-threaded.
    """
    if images.shape[0] == 0:
        raise ValueError("cannot train codec on an empty dataset")
    codec = build_codec(config, derive_seed(rng_seed, "codec-init"))
    opt = torch.optim.AdamW(codec.parameters(), lr=lr, weight_decay=0.0)
    n = images.shape[0]
    log_rows: list[str] = []
    for step in range(steps):
        gen = torch_generator(derive_seed(rng_seed, "codec-batch", step))
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = images[idx]
        mean, logvar, z = codec.encode(batch, rng_seed=derive_seed(rng_seed, "codec-eta", step))
        recon = codec.decode(z)
        total, recon_term, kl_term = codec_loss(batch, mean, logvar, recon, config.kl_weight)
        if not torch.isfinite(total):
            raise NumericError(f"codec loss became non-finite at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        log_rows.append(
            f"{step},{float(total):.6f},{float(recon_term):.6f},{float(kl_term):.6f}"
        )
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("step,total,recon,kl\n" + "\n".join(log_rows) + "\n")
    with torch.no_grad():
        means = encode_dataset(codec, images)
        latent_mu = means.mean(dim=(0, 2, 3))
        latent_sigma = means.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-6)
    return codec, latent_mu, latent_sigma


@torch.no_grad()
def encode_dataset(codec: MiniVAE, images: Tensor, batch_size: int = 128) -> Tensor:
    """Posterior means for every image, [N, C_z, h, w]."""
    chunks = [codec.encode(images[i : i + batch_size])[0] for i in range(0, images.shape[0], batch_size)]
    return torch.cat(chunks, dim=0)


def standardize(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    return (z - mu.view(1, -1, 1, 1)) / sigma.view(1, -1, 1, 1)


def destandardize(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    return z * sigma.view(1, -1, 1, 1) + mu.view(1, -1, 1, 1)


def codec_config_from_dict(d: Mapping) -> CodecConfig:
    return CodecConfig(
        image_size=int(d["image_size"]),
        image_channels=int(d["image_channels"]),
        downsample_factor=int(d["downsample_factor"]),
        latent_channels=int(d["latent_channels"]),
        base_channels=int(d["base_channels"]),
        kl_weight=float(d["kl_weight"]),
    )
