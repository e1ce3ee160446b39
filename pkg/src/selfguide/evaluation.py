"""Checkpoint evaluation: FID against the desk-scale embedder, the
inception-score analog, and teacher-feature separability.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError
from .flow import forward_interpolate
from .guidance import GuideTeacher, extract_guided_feature, load_frozen_guide
from .metrics import embed_images, fit_stats, frechet_distance, inception_score_analog, silhouette_score, softmax_rows
from .sampler import SampleRequest, sample_images
from .seeding import derive_seed, set_deterministic, torch_generator
from .trainer import load_codec, load_dataset, load_embedder, load_model_from_archive


def generate_samples(
    model, codec, mu, sigma, budget: int, num_classes: int, seed: int,
    num_steps: int, cfg_scale: float, batch_size: int = 64,
) -> torch.Tensor:
    """Round-robin class labels across the budget; deterministic per seed."""
    images = []
    produced = 0
    chunk = 0
    while produced < budget:
        b = min(batch_size, budget - produced)
        labels = [(produced + i) % num_classes for i in range(b)]
        req = SampleRequest(
            labels=labels,
            batch_size=b,
            num_steps=num_steps,
            cfg_scale=cfg_scale,
            rng_seed=derive_seed(seed, "sample-chunk", chunk),
        )
        images.append(sample_images(model, codec, mu, sigma, req))
        produced += b
        chunk += 1
    return torch.cat(images, dim=0)


def teacher_feature_silhouette(
    teacher: GuideTeacher,
    latents: torch.Tensor,
    labels: torch.Tensor,
    layer: int,
    omega: float,
    t: float,
    seed: int,
) -> tuple[float, float]:
    """Silhouette of token-pooled teacher features, (conditional, guided).

    Features are extracted at the given timestep on identical noisy inputs;
    each sample is represented by its token-mean feature vector.
    """
    eps = torch.randn(latents.shape, generator=torch_generator(derive_seed(seed, "sil-eps")))
    tv = torch.full((latents.shape[0],), float(t))
    state = forward_interpolate(latents, eps, tv)
    f_c = teacher.features(state, labels, layer).tokens
    f_g = extract_guided_feature(teacher, state, labels, layer, omega).tokens
    pooled_c = f_c.mean(dim=1).cpu().numpy()
    pooled_g = f_g.mean(dim=1).cpu().numpy()
    y = labels.cpu().numpy()
    return silhouette_score(pooled_c, y), silhouette_score(pooled_g, y)


def evaluate(
    cfg: RunConfig,
    checkpoint: Union[str, Path, None] = None,
    budget: Optional[int] = None,
    report_path: Union[str, Path, None] = None,
) -> dict[str, float]:
    """Sample from the checkpoint (EMA weights), score against real data,
    and write a key=value report file.
    """
    set_deterministic(cfg.run.deterministic)
    ckpt = str(checkpoint or cfg.eval.checkpoint)
    if not ckpt:
        raise ConfigError("eval.checkpoint (or an explicit checkpoint) is required")
    budget = int(budget if budget is not None else cfg.eval.budget)
    if budget < 2:
        raise ConfigError(f"eval budget must be >= 2, got {budget}")
    if not cfg.run.embedder_checkpoint:
        raise ConfigError("run.embedder_checkpoint is required for evaluation")

    model = load_model_from_archive(ckpt, prefer_ema=True)
    codec, mu, sigma = load_codec(cfg)
    embedder = load_embedder(cfg.run.embedder_checkpoint)

    real = load_dataset(cfg, split="eval")
    # class-ordered on disk; shuffle before slicing so subsets span all classes
    perm = np.random.default_rng(derive_seed(cfg.run.seed, "eval-perm")).permutation(len(real))
    real_images = torch.from_numpy(real.images[perm[: min(budget, len(real))]])
    fake_images = generate_samples(
        model, codec, mu, sigma, budget, cfg.model.num_classes,
        seed=derive_seed(cfg.run.seed, "eval"),
        num_steps=cfg.eval.num_steps, cfg_scale=cfg.eval.cfg_scale,
    )

    real_stats = fit_stats(embed_images(embedder, real_images))
    fake_stats = fit_stats(embed_images(embedder, fake_images))
    report: dict[str, float] = {
        "fid_desk": frechet_distance(real_stats, fake_stats),
        "inception_score": inception_score_analog(softmax_rows(embedder, fake_images)),
        "samples": float(budget),
    }

    if cfg.guidance.guide_checkpoint:
        teacher = load_frozen_guide(cfg.guidance.guide_checkpoint)
        from .codec import encode_dataset, standardize

        b = min(cfg.eval.silhouette_batch, len(real))
        latents = standardize(
            encode_dataset(codec, torch.from_numpy(real.images[:b])), mu, sigma
        )
        sil_c, sil_g = teacher_feature_silhouette(
            teacher,
            latents,
            torch.from_numpy(real.labels[:b]),
            layer=cfg.guidance.guiding_layer,
            omega=cfg.guidance.omega,
            t=cfg.eval.silhouette_t,
            seed=derive_seed(cfg.run.seed, "eval-sil"),
        )
        report["silhouette_conditional"] = sil_c
        report["silhouette_guided"] = sil_g

    path = Path(report_path or Path(cfg.run.out_dir) / "metrics_report.txt")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={report[k]!r}" for k in sorted(report)]
    path.write_text("\n".join(lines) + "\n")
    return report
