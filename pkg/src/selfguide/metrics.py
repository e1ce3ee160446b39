"""Desk-scale generative metrics and feature-space analysis.

FID is computed against a small self-trained classifier's penultimate
features rather than Inception-v3, so absolute values are not comparable to
published numbers; only relative orderings are meaningful. Representation
separability is metricized with a silhouette score, and deterministic PCA
replaces stochastic embeddings for feature visualization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .flow import forward_interpolate
from .seeding import torch_generator


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of an embedding cloud: mean, covariance, sample count."""

    mu: np.ndarray
    sigma: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.shape[0], self.mu.shape[0]):
            raise ValueError(
                f"inconsistent stats shapes: mu {self.mu.shape}, sigma {self.sigma.shape}"
            )
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        min_eig = float(np.linalg.eigvalsh(self.sigma).min())
        if min_eig < -1e-6:
            raise ValueError(f"covariance not PSD within tolerance (min eigenvalue {min_eig:.3e})")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance of [N, d] features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be [N, d], got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit stats, got {n}")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    sigma = np.atleast_2d(sigma)
    return FeatureStats(mu=mu, sigma=sigma, count=n)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-1e-6, 0) are clamped to zero; anything more negative is
    a genuine PSD violation and raises.
    """
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise ValueError(f"matrix not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), symmetric, >= 0."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    sqrt_a = _psd_sqrt(a.sigma)
    inner = sqrt_a @ b.sigma @ sqrt_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -1e-6 * max(1.0, abs(vals.max())):
        raise ValueError(f"cross term not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    tr_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def inception_score_analog(softmax_rows: np.ndarray) -> float:
    """exp(mean_n KL(p(y|x_n) || mean_m p(y|x_m))), in [1, K]."""
    p = np.asarray(softmax_rows, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"softmax_rows must be [N, K], got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("softmax rows must be non-negative")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("each softmax row must sum to 1 within 1e-5")
    p = p / sums[:, None]
    p_bar = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p) - np.log(p_bar), 0.0)
    kl = (p * logs).sum(axis=1)
    kl = np.clip(kl, 0.0, None)  # KL >= 0; negatives are rounding noise
    return float(np.exp(kl.mean()))


def silhouette_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette (b - a) / max(a, b) with Euclidean distances.

    a is the mean intra-cluster distance (excluding the point itself), b the
    smallest mean distance to another cluster. The degenerate a = b = 0 case
    scores 0 by convention.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"expected [N, d] features and [N] labels, got {x.shape}, {y.shape}")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    if counts.min() < 2:
        singleton = classes[counts.argmin()]
        raise ValueError(f"cluster {singleton!r} is a singleton; every label needs >= 2 members")
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    dist = np.sqrt(np.clip(d2, 0.0, None))
    scores = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        own = y == y[i]
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, y == c].mean() for c in classes if c != y[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def pca_project(features: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top-k principal components, deterministic sign.

    Components are eigenvectors of the covariance sorted by descending
    eigenvalue; each component's largest-magnitude loading is made positive.
    Returns (projected [N, k], explained_variance_ratio [k]).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be [N, d], got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must be in [1, {min(n, d)}], got {k}")
    centered = x - x.mean(axis=0)
    cov = (centered.T @ centered) / (n - 1) if n > 1 else np.zeros((d, d))
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    comps = vecs[:, :k].copy()
    for j in range(k):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    total = vals.sum()
    ratio = vals[:k] / total if total > 0 else np.zeros(k)
    return centered @ comps, ratio


class SmallEmbedder(nn.Module):
    """Small convolutional classifier; penultimate features stand in for Inception."""

    def __init__(self, image_size: int, num_classes: int, feature_dim: int = 64, width: int = 32):
        super().__init__()
        self.image_size = image_size
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        w = width
        self.convs = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.GroupNorm(8, w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(8, 2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(8, 4 * w),
            nn.SiLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature = nn.Linear(4 * w, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, images: Tensor) -> Tensor:
        h = self.pool(self.convs(images)).flatten(1)
        return F.silu(self.feature(h))

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.features(images))


def build_embedder(
    image_size: int, num_classes: int, seed: int, feature_dim: int = 64, width: int = 32
) -> SmallEmbedder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        emb = SmallEmbedder(image_size, num_classes, feature_dim, width)
    return emb


@torch.no_grad()
def embed_images(embedder: SmallEmbedder, images: Tensor, batch_size: int = 256) -> np.ndarray:
    feats = [
        embedder.features(images[i : i + batch_size]).cpu().numpy()
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(feats, axis=0).astype(np.float64)


@torch.no_grad()
def softmax_rows(embedder: SmallEmbedder, images: Tensor, batch_size: int = 256) -> np.ndarray:
    rows = [
        torch.softmax(embedder(images[i : i + batch_size]), dim=1).cpu().numpy()
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(rows, axis=0).astype(np.float64)


def export_feature_panel(
    model,
    layers: Iterable[int],
    t_values: Sequence[float],
    latents: Tensor,
    labels: Tensor,
    out_dir: Union[str, Path],
    rng_seed: int = 0,
    upscale: int = 16,
) -> list[Path]:
    """Write one RGB token-grid panel per (layer, t) plus a manifest.

    For each configuration the model is run on x_t built from the given
    latent batch with seeded noise; the tapped tokens across the whole batch
    are reduced to their top-3 PCA components, min-max mapped to RGB over the
    panel, and tiled one token-grid per sample into a single PNG.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = sorted(set(int(j) for j in layers))
    for t in t_values:
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"t value {t} out of [0, 1]")
    files: list[Path] = []
    entries = []
    eps = torch.randn(latents.shape, generator=torch_generator(rng_seed))
    for t in t_values:
        tv = torch.full((latents.shape[0],), float(t))
        state = forward_interpolate(latents, eps, tv)
        if layers:
            with torch.no_grad():
                _, taps = model.forward_with_taps(state, labels, tap_layers=layers)
        for layer in layers:
            tokens = taps[layer].tokens  # [B, N, D]
            b, n, _ = tokens.shape
            flat = tokens.reshape(b * n, -1).cpu().numpy()
            proj, _ = pca_project(flat, k=min(3, flat.shape[1], flat.shape[0]))
            if proj.shape[1] < 3:
                proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
            lo, hi = proj.min(axis=0), proj.max(axis=0)
            span = np.where(hi - lo > 0, hi - lo, 1.0)
            rgb = ((proj - lo) / span * 255.0).round().astype(np.uint8)
            g = math.isqrt(n)
            grid = rgb.reshape(b, g, g, 3).repeat(upscale, axis=1).repeat(upscale, axis=2)
            panel = np.concatenate(list(grid), axis=1)  # samples side by side
            name = f"panel_layer{layer:02d}_t{float(t):.2f}.png"
            Image.fromarray(panel).save(out_dir / name, format="PNG")
            files.append(out_dir / name)
            entries.append({"file": name, "layer": layer, "t": float(t)})
    manifest = {
        "batch_size": int(latents.shape[0]),
        "rng_seed": rng_seed,
        "panels": entries,
    }
    (out_dir / "panel_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return files
