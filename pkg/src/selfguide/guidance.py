"""Two-stage alignment losses and the frozen guiding model.

Stage 1 pulls a shallow layer's projected token features toward the clean
VAE latent. Stage 2 supervises the same shallow layer with guidance-enhanced
deep features from a frozen, partially trained copy of the backbone:
f_g = f_u + omega * (f_c - f_u), combined as L = L_diff + lambda * L_guide
until an early-stop step, after which only the diffusion loss remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import FeatureMap, LatentTransformer, build_model, model_config_from_dict
from .checkpoint import Archive, hash_tensors, load_archive, load_module_tensors
from .errors import FrozenTeacherError
from .flow import NoisyState


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 30.0
    lambda_guide: float = 0.5
    guided_layer: int = 0  # 0 = derive from model depth
    guiding_layer: int = 0
    stop_step: int = 0
    stop_epochs: int = 0  # >0 converts to steps from the dataset size at train time
    guide_checkpoint: str = ""
    lambda_align: float = 0.5  # stage-1 weight, reuses the stage-2 default

    def __post_init__(self) -> None:
        for name in ("omega", "lambda_guide", "lambda_align"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.stop_step < 0 or self.stop_epochs < 0:
            raise ValueError("stop_step and stop_epochs must be >= 0")


class ProjectionHead(nn.Module):
    """Three affine layers with SiLU between, hidden width equal to the input."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim),
            nn.SiLU(),
            nn.Linear(in_dim, in_dim),
            nn.SiLU(),
            nn.Linear(in_dim, out_dim),
        )
        self.out_dim = out_dim

    def forward(self, tokens: Tensor) -> Tensor:
        return self.net(tokens)


def build_head(in_dim: int, out_dim: int, seed: int) -> ProjectionHead:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = ProjectionHead(in_dim, out_dim)
    return head


def vae_align_loss(f_n: FeatureMap, head: ProjectionHead, z: Tensor) -> Tensor:
    """MSE between the projected shallow tokens and the clean latent.

    Each token is projected to a p^2*C_z patch; patches are reassembled in
    row-major order into the latent grid before comparing against z.
    """
    from .backbone import unpatchify

    b, n_tok, _ = f_n.tokens.shape
    _, c, h, w = z.shape
    if h != w:
        raise ValueError(f"latent grid must be square, got {h}x{w}")
    grid = math.isqrt(n_tok)
    if grid * grid != n_tok or h % grid != 0:
        raise ValueError(
            f"token count {n_tok} does not tile the {h}x{w} latent grid"
        )
    p = h // grid
    if head.out_dim != p * p * c:
        raise ValueError(
            f"head output dim {head.out_dim} != patch volume {p * p * c} "
            f"for {n_tok} tokens over a {h}x{w}x{c} latent"
        )
    if z.shape[0] != b:
        raise ValueError(f"batch mismatch: features {b}, latent {z.shape[0]}")
    pred = unpatchify(head(f_n.tokens), p, c)
    return torch.mean((pred - z) ** 2)


def guide_loss(f_n: FeatureMap, head: ProjectionHead, f_g: FeatureMap) -> Tensor:
    """MSE between projected student tokens and the guidance feature target."""
    if f_g.tokens.requires_grad:
        raise FrozenTeacherError("guidance target carries gradients; teacher must be frozen")
    if f_n.tokens.shape[:2] != f_g.tokens.shape[:2]:
        raise ValueError(
            f"token layout mismatch: {tuple(f_n.tokens.shape)} vs {tuple(f_g.tokens.shape)}"
        )
    if head.out_dim != f_g.tokens.shape[-1]:
        raise ValueError(
            f"head output dim {head.out_dim} != guidance feature dim {f_g.tokens.shape[-1]}"
        )
    return torch.mean((head(f_n.tokens) - f_g.tokens) ** 2)


def combined_loss(
    l_diff: Tensor, l_guide: Union[Tensor, float], lambda_guide: float, active: bool
) -> Tensor:
    """l_diff + lambda * l_guide while guidance is active, l_diff exactly after."""
    if not active:
        return l_diff
    return l_diff + lambda_guide * l_guide


def guidance_active(step: int, stop_step: int) -> bool:
    """Guidance applies to steps strictly before stop_step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return step < stop_step


class GuideTeacher:
    """A backbone in inference-only state; weights immutable after load."""

    def __init__(self, model: LatentTransformer, source: str = ""):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.source = source
        self._load_hash = self.parameters_hash()

    @property
    def config(self):
        return self._model.config

    @property
    def model(self) -> LatentTransformer:
        return self._model

    def train(self, mode: bool = True):
        raise FrozenTeacherError("guiding model is frozen; it cannot enter training mode")

    def parameters_hash(self) -> str:
        return hash_tensors({k: v for k, v in self._model.state_dict().items()})

    def assert_unchanged(self) -> None:
        if self.parameters_hash() != self._load_hash:
            raise FrozenTeacherError("guiding model parameters changed after load")

    @torch.no_grad()
    def features(self, state: NoisyState, labels: Tensor, layer: int) -> FeatureMap:
        _, taps = self._model.forward_with_taps(state, labels, tap_layers=(layer,))
        return taps[layer]


def extract_guided_feature(
    teacher: GuideTeacher, state: NoisyState, labels: Tensor, layer: int, omega: float
) -> FeatureMap:
    """Guidance-enhanced teacher feature f_g = f_u + omega * (f_c - f_u).

    The teacher runs twice on the identical input, once with the batch's real
    class labels and once with all-null conditioning; both taps come from the
    same layer. The result carries no gradient.

    The affine form (1-omega)*f_u + omega*f_c is used so omega=0 and omega=1
    return f_u and f_c bit-exactly.
    """
    cfg = teacher.config
    if not 1 <= layer <= cfg.depth:
        raise ValueError(f"guiding layer {layer} out of range [1, {cfg.depth}]")
    if labels.numel() and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError("guidance requires real class labels (no null entries)")
    null = torch.full_like(labels, cfg.null_class)
    f_c = teacher.features(state, labels, layer).tokens
    f_u = teacher.features(state, null, layer).tokens
    f_g = (1.0 - omega) * f_u + omega * f_c
    return FeatureMap(layer=layer, tokens=f_g.detach())


def load_frozen_guide(archive: Union[Archive, str]) -> GuideTeacher:
    """Materialize the guiding model from a checkpoint archive.

    EMA weights are used when the archive contains them, raw weights
    otherwise. Missing tensors raise an error naming the tensor.
    """
    if not isinstance(archive, Archive):
        archive = load_archive(archive)
    cfg = model_config_from_dict(archive.manifest["config"]["model"])
    model = build_model(cfg, seed=0)
    prefix = "ema." if any(n.startswith("ema.") for n in archive.tensor_names) else "model."
    load_module_tensors(model, archive, prefix)
    return GuideTeacher(model, source=str(archive.path))


def guidance_config_from_dict(d: Mapping) -> GuidanceConfig:
    return GuidanceConfig(
        omega=float(d["omega"]),
        lambda_guide=float(d["lambda_guide"]),
        guided_layer=int(d["guided_layer"]),
        guiding_layer=int(d["guiding_layer"]),
        stop_step=int(d["stop_step"]),
        stop_epochs=int(d["stop_epochs"]),
        guide_checkpoint=str(d["guide_checkpoint"]),
        lambda_align=float(d["lambda_align"]),
    )
