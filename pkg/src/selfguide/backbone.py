"""DiT-style transformer over latent patches with per-layer feature taps.

Blocks are pre-norm attention + MLP modulated by adaLN-zero conditioning
(timestep embedding + class embedding). A reserved null class index enables
classifier-free guidance; per-layer taps expose the residual stream after
each block for the alignment losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import torch
import torch.nn as nn
from torch import Tensor

from .flow import NoisyState
from .seeding import torch_generator


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    hidden_dim: int
    heads: int
    patch_size: int
    latent_channels: int
    latent_size: int
    num_classes: int
    cond_dropout_prob: float = 0.1

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.latent_size % self.patch_size != 0:
            raise ValueError(
                f"latent_size {self.latent_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError(f"cond_dropout_prob must be in [0, 1], got {self.cond_dropout_prob}")

    @property
    def grid_size(self) -> int:
        return self.latent_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    @property
    def null_class(self) -> int:
        """Index of the learned null condition (reserved last embedding row)."""
        return self.num_classes


@dataclass(frozen=True)
class FeatureMap:
    """Token features [B, N_tok, D] read from the residual stream after `layer`."""

    layer: int
    tokens: Tensor

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be [B, N, D], got shape {tuple(self.tokens.shape)}")


def default_layer_pair(depth: int) -> tuple[int, int]:
    """Default (guided, guiding) layers: floor(n/2) and floor(2n/3)."""
    if depth < 3:
        raise ValueError(f"depth must be >= 3 for the default layer pair, got {depth}")
    return depth // 2, (2 * depth) // 3


def apply_condition_dropout(labels: Tensor, prob: float, rng_seed: int, null_class: int) -> Tensor:
    """Independently replace each label by the null class with probability prob."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0, 1], got {prob}")
    if prob == 0.0:
        return labels
    gen = torch_generator(rng_seed)
    drop = torch.rand(labels.shape[0], generator=gen) < prob
    return torch.where(drop, torch.full_like(labels, null_class), labels)


def unpatchify(tokens: Tensor, patch_size: int, channels: int) -> Tensor:
    """Reassemble [B, N, p*p*C] tokens into a [B, C, H, W] grid, row-major patches."""
    b, n, dim = tokens.shape
    p = patch_size
    if dim != p * p * channels:
        raise ValueError(f"token dim {dim} != patch_size^2 * channels = {p * p * channels}")
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"token count {n} is not a square grid")
    x = tokens.reshape(b, g, g, p, p, channels)
    x = torch.einsum("bhwpqc->bchpwq", x)
    return x.reshape(b, channels, g * p, g * p)


def patchify(x: Tensor, patch_size: int) -> Tensor:
    """Split [B, C, H, W] into row-major [B, N, p*p*C] patch tokens (unpatchify inverse)."""
    b, c, h, w = x.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"spatial size ({h}, {w}) not divisible by patch_size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    x = torch.einsum("bchpwq->bhwpqc", x)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def sincos_pos_embed_2d(dim: int, grid: int) -> Tensor:
    """Fixed 2D sine-cosine positional embedding, [grid*grid, dim]."""
    if dim % 4 != 0:
        raise ValueError(f"hidden_dim must be divisible by 4 for 2D sin-cos embedding, got {dim}")
    half = dim // 2

    def axis_embed(pos: Tensor) -> Tensor:
        omega = torch.arange(half // 2, dtype=torch.float64) / (half // 2)
        omega = 1.0 / 10000**omega
        out = pos[:, None] * omega[None, :]
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    coords = torch.arange(grid, dtype=torch.float64)
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    emb = torch.cat([axis_embed(gy.reshape(-1)), axis_embed(gx.reshape(-1))], dim=1)
    return emb.float()


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a two-layer MLP."""

    def __init__(self, hidden_dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def forward(self, t: Tensor) -> Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
        )
        args = t[:, None].float() * freqs[None, :] * 1000.0
        feats = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
        return self.mlp(feats)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Block(nn.Module):
    """Pre-norm attention + MLP with adaLN-zero modulation."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden, dim),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaln[-1].weight)
        nn.init.zeros_(self.adaln[-1].bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaln(cond).chunk(6, dim=1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch_size: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, patch_size * patch_size * out_channels)
        nn.init.zeros_(self.adaln[-1].weight)
        nn.init.zeros_(self.adaln[-1].bias)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.adaln(cond).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class LatentTransformer(nn.Module):
    """Velocity-prediction transformer over latent patches with feature taps."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(
            c.latent_channels, c.hidden_dim, kernel_size=c.patch_size, stride=c.patch_size
        )
        self.register_buffer("pos_embed", sincos_pos_embed_2d(c.hidden_dim, c.grid_size))
        self.t_embed = TimestepEmbedder(c.hidden_dim)
        # Table row c.num_classes is the learned null condition.
        self.class_embed = nn.Embedding(c.num_classes + 1, c.hidden_dim)
        self.blocks = nn.ModuleList(Block(c.hidden_dim, c.heads) for _ in range(c.depth))
        self.final = FinalLayer(c.hidden_dim, c.patch_size, c.latent_channels)

    def embed_condition(self, labels: Tensor) -> Tensor:
        """Map class indices (or the null index) through the embedding table."""
        if labels.max() > self.config.num_classes or labels.min() < 0:
            raise ValueError(
                f"labels must lie in [0, {self.config.num_classes}] "
                f"(the last index is the null condition)"
            )
        return self.class_embed(labels)

    def forward_with_taps(
        self,
        state: NoisyState,
        labels: Tensor,
        tap_layers: Iterable[int] = (),
    ) -> tuple[Tensor, dict[int, FeatureMap]]:
        """Run the model, returning the velocity prediction and requested taps.

        Tap layer j (1-indexed, j in [1, depth]) is the residual stream right
        after block j, before the final norm. Requesting taps never alters
        the velocity output.
        """
        c = self.config
        taps = sorted(set(int(j) for j in tap_layers))
        for j in taps:
            if not 1 <= j <= c.depth:
                raise ValueError(f"tap layer {j} out of range [1, {c.depth}]")
        x_t, t = state.x_t, state.t
        if x_t.shape[1:] != (c.latent_channels, c.latent_size, c.latent_size):
            raise ValueError(
                f"x_t shape {tuple(x_t.shape)} incompatible with model config "
                f"[{c.latent_channels}, {c.latent_size}, {c.latent_size}]"
            )
        if labels.shape[0] != x_t.shape[0]:
            raise ValueError(
                f"batch mismatch: x_t has {x_t.shape[0]} samples, labels {labels.shape[0]}"
            )
        tokens = self.patch_embed(x_t).flatten(2).transpose(1, 2)
        tokens = tokens + self.pos_embed.unsqueeze(0)
        cond = self.t_embed(t) + self.embed_condition(labels)
        collected: dict[int, FeatureMap] = {}
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens, cond)
            if i in taps:
                collected[i] = FeatureMap(layer=i, tokens=tokens)
        out = self.final(tokens, cond)
        v_pred = unpatchify(out, c.patch_size, c.latent_channels)
        return v_pred, collected

    def velocity(self, x_t: Tensor, t: Tensor, labels: Tensor) -> Tensor:
        v, _ = self.forward_with_taps(NoisyState(x_t=x_t, t=t), labels)
        return v


def build_model(config: ModelConfig, seed: int) -> LatentTransformer:
    """Construct a model with weights drawn from a seeded global-RNG fork."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = LatentTransformer(config)
    return model


def model_config_from_dict(d: Mapping) -> ModelConfig:
    return ModelConfig(
        depth=int(d["depth"]),
        hidden_dim=int(d["hidden_dim"]),
        heads=int(d["heads"]),
        patch_size=int(d["patch_size"]),
        latent_channels=int(d["latent_channels"]),
        latent_size=int(d["latent_size"]),
        num_classes=int(d["num_classes"]),
        cond_dropout_prob=float(d["cond_dropout_prob"]),
    )
