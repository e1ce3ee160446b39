"""Training orchestration: codec/embedder prep, the two diffusion stages,
the plain baseline, EMA tracking, loss traces, checkpointing and resume.

All stochastic draws are derived from (seed, step, tag), so an interrupted
run resumed from a checkpoint reproduces the uninterrupted trace exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import codec as codec_mod
from .backbone import LatentTransformer, apply_condition_dropout, build_model
from .checkpoint import (
    Archive,
    load_archive,
    load_module_tensors,
    module_tensors,
    save_archive,
)
from .codec import MiniVAE, encode_dataset, standardize
from .config import RunConfig, config_snapshot
from .data import (
    LabeledImageSet,
    ShapesSpec,
    batch_indices,
    generate_shapes,
    load_image_folder,
    steps_per_epoch,
)
from .errors import ConfigError, NumericError
from .flow import diffusion_loss, forward_interpolate, sample_timesteps, velocity_target
from .guidance import (
    GuideTeacher,
    ProjectionHead,
    build_head,
    combined_loss,
    extract_guided_feature,
    guidance_active,
    guide_loss,
    load_frozen_guide,
    vae_align_loss,
)
from .seeding import derive_seed, set_deterministic

TRACE_HEADER = "step,l_diff,l_guide,lambda_effective,iter_rate"


class LossTrace:
    """Append-only per-step loss records with strictly increasing steps."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.rows: list[tuple[int, float, float, float, float]] = []

    def append(
        self, step: int, l_diff: float, l_guide: float, lambda_effective: float, iter_rate: float
    ) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError(f"trace steps must increase: got {step} after {self.rows[-1][0]}")
        self.rows.append((step, l_diff, l_guide, lambda_effective, iter_rate))

    def write(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [TRACE_HEADER]
        for step, l_diff, l_guide, lam, rate in self.rows:
            lines.append(f"{step},{l_diff!r},{l_guide!r},{lam!r},{rate!r}")
        self.path.write_text("\n".join(lines) + "\n")
        return self.path


def read_trace(path: Union[str, Path]) -> list[dict[str, float]]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError(f"{path} is not a loss trace (bad header)")
    keys = TRACE_HEADER.split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(keys, [float(v) for v in vals]))
        row["step"] = int(vals[0])
        out.append(row)
    return out


@torch.no_grad()
def ema_update(ema_model: torch.nn.Module, model: torch.nn.Module, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * raw, element-wise over parameters."""
    ema_params = dict(ema_model.named_parameters())
    params = dict(model.named_parameters())
    if ema_params.keys() != params.keys():
        raise ValueError("EMA/raw parameter trees do not match")
    for name, p in params.items():
        ema_params[name].mul_(decay).add_(p, alpha=1.0 - decay)


def make_optimizer(params, cfg: RunConfig) -> torch.optim.AdamW:
    o = cfg.optim
    return torch.optim.AdamW(
        params, lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay
    )


def load_dataset(cfg: RunConfig, split: str = "train") -> LabeledImageSet:
    d = cfg.data
    if d.kind == "shapes":
        seed = d.seed if split == "train" else derive_seed(d.seed, "split", split)
        spec = ShapesSpec(
            image_size=d.image_size,
            num_classes=d.num_classes,
            samples_per_class=d.samples_per_class,
            rng_seed=seed,
        )
        return generate_shapes(spec)
    if not d.root:
        raise ConfigError("data.root is required for folder datasets")
    return load_image_folder(d.root, d.image_size)


def load_codec(cfg: RunConfig) -> tuple[MiniVAE, torch.Tensor, torch.Tensor]:
    if not cfg.run.codec_checkpoint:
        raise ConfigError("run.codec_checkpoint is required for this command")
    archive = load_archive(cfg.run.codec_checkpoint)
    codec_cfg = codec_mod.codec_config_from_dict(archive.manifest["config"]["codec"])
    codec = codec_mod.build_codec(codec_cfg, seed=0)
    load_module_tensors(codec, archive, "codec.")
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, archive.torch("stats.mu"), archive.torch("stats.sigma")


def train_codec_command(cfg: RunConfig, out_dir: Optional[Path] = None) -> Path:
    set_deterministic(cfg.run.deterministic)
    out = Path(out_dir or cfg.run.out_dir)
    ds = load_dataset(cfg)
    images = torch.from_numpy(ds.images)
    codec, mu, sigma = codec_mod.train_codec(
        images,
        cfg.codec,
        steps=cfg.run.codec_steps,
        rng_seed=derive_seed(cfg.run.seed, "codec"),
        log_path=out / "codec_trace.csv",
    )
    tensors = module_tensors(codec, "codec.")
    tensors["stats.mu"] = mu
    tensors["stats.sigma"] = sigma
    return save_archive(
        out / "codec",
        tensors,
        kind="codec",
        step=cfg.run.codec_steps,
        config=config_snapshot(cfg),
    )


def write_latent_cache(
    cfg: RunConfig, codec: MiniVAE, ds: LabeledImageSet, mu, sigma, path: Path
) -> Path:
    """Persist posterior means + standardization stats for a dataset split."""
    means = encode_dataset(codec, torch.from_numpy(ds.images))
    tensors = {
        "z_mean": means,
        "labels": torch.from_numpy(ds.labels.astype(np.float32)),
        "stats.mu": mu,
        "stats.sigma": sigma,
    }
    return save_archive(
        path,
        tensors,
        kind="latent-cache",
        config=config_snapshot(cfg),
        extra={"num_samples": len(ds), "latent_shape": list(means.shape[1:])},
    )


def train_embedder_command(cfg: RunConfig, out_dir: Optional[Path] = None) -> Path:
    """Train the small eval classifier; held-out accuracy goes in the manifest."""
    from .metrics import build_embedder

    set_deterministic(cfg.run.deterministic)
    out = Path(out_dir or cfg.run.out_dir)
    ds = load_dataset(cfg)
    images = torch.from_numpy(ds.images)
    labels = torch.from_numpy(ds.labels)
    n = len(ds)
    holdout = max(1, n // 10)
    perm = torch.from_numpy(np.random.default_rng(derive_seed(cfg.run.seed, "embedder-split")).permutation(n))
    train_idx, hold_idx = perm[holdout:], perm[:holdout]
    emb = build_embedder(
        cfg.data.image_size, ds.num_classes, seed=derive_seed(cfg.run.seed, "embedder-init")
    )
    opt = torch.optim.AdamW(emb.parameters(), lr=1e-3, weight_decay=0.0)
    steps = cfg.run.embedder_steps
    batch = min(128, len(train_idx))
    for step in range(steps):
        gen = torch.Generator().manual_seed(derive_seed(cfg.run.seed, "embedder-batch", step))
        sel = train_idx[torch.randint(0, len(train_idx), (batch,), generator=gen)]
        logits = emb(images[sel])
        loss = torch.nn.functional.cross_entropy(logits, labels[sel])
        if not torch.isfinite(loss):
            raise NumericError(f"embedder loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    emb.eval()
    with torch.no_grad():
        pred = emb(images[hold_idx]).argmax(dim=1)
        accuracy = float((pred == labels[hold_idx]).float().mean())
    return save_archive(
        out / "embedder",
        module_tensors(emb, "embedder."),
        kind="embedder",
        step=steps,
        config=config_snapshot(cfg),
        extra={"holdout_accuracy": accuracy, "feature_dim": emb.feature_dim},
    )


def load_embedder(path: Union[str, Path]):
    from .metrics import build_embedder

    archive = load_archive(path)
    snap = archive.manifest["config"]
    emb = build_embedder(
        int(snap["data"]["image_size"]),
        int(snap["data"]["num_classes"]),
        seed=0,
        feature_dim=int(archive.manifest["extra"]["feature_dim"]),
    )
    load_module_tensors(emb, archive, "embedder.")
    emb.eval()
    for p in emb.parameters():
        p.requires_grad_(False)
    return emb


@dataclass
class TrainResult:
    checkpoint: Path
    trace: Path
    steps: int
    stop_step: int


def resolve_stop_step(cfg: RunConfig, dataset_size: int) -> int:
    """Epoch-denominated early stop converts to steps via ceil(N / batch)."""
    g = cfg.guidance
    if g.stop_epochs > 0:
        return g.stop_epochs * steps_per_epoch(dataset_size, cfg.run.batch_size)
    return g.stop_step


def _save_train_checkpoint(
    out: Path,
    tag: str,
    cfg: RunConfig,
    mode: str,
    step: int,
    model: LatentTransformer,
    ema: LatentTransformer,
    head: Optional[ProjectionHead],
    opt: torch.optim.AdamW,
    extra: Optional[dict] = None,
) -> Path:
    tensors = module_tensors(model, "model.")
    tensors.update(module_tensors(ema, "ema."))
    if head is not None:
        tensors.update(module_tensors(head, "head."))
    opt_state = opt.state_dict()["state"]
    param_names = _optimizer_param_names(model, head)
    for idx, st in opt_state.items():
        name = param_names[idx]
        tensors[f"optim.{name}.exp_avg"] = st["exp_avg"]
        tensors[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
        tensors[f"optim.{name}.step"] = st["step"]
    return save_archive(
        out / tag,
        tensors,
        kind=f"diffusion-{mode}",
        step=step,
        config=config_snapshot(cfg),
        extra=extra or {},
    )


def _optimizer_param_names(model: LatentTransformer, head: Optional[ProjectionHead]) -> list[str]:
    names = [f"model.{n}" for n, _ in model.named_parameters()]
    if head is not None:
        names += [f"head.{n}" for n, _ in head.named_parameters()]
    return names


def _load_train_checkpoint(
    archive: Archive,
    model: LatentTransformer,
    ema: LatentTransformer,
    head: Optional[ProjectionHead],
    opt: torch.optim.AdamW,
) -> int:
    load_module_tensors(model, archive, "model.")
    load_module_tensors(ema, archive, "ema.")
    if head is not None:
        load_module_tensors(head, archive, "head.")
    param_names = _optimizer_param_names(model, head)
    state = {}
    for idx, name in enumerate(param_names):
        key = f"optim.{name}.exp_avg"
        if key not in archive.tensors:
            continue
        state[idx] = {
            "step": archive.torch(f"optim.{name}.step"),
            "exp_avg": archive.torch(f"optim.{name}.exp_avg"),
            "exp_avg_sq": archive.torch(f"optim.{name}.exp_avg_sq"),
        }
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)
    return archive.step


def _latest_resumable(out: Path, total_steps: int) -> Optional[Path]:
    best, best_step = None, -1
    for p in out.glob("ckpt_step*"):
        if not (p / "manifest.json").is_file():
            continue
        step = load_archive(p).step
        if best_step < step < total_steps:
            best, best_step = p, step
    return best


def train_diffusion(cfg: RunConfig, mode: str, resume: bool = False) -> TrainResult:
    """Train `mode` in {"baseline", "stage1", "stage2"} and persist artifacts.

    baseline: plain velocity-matching diffusion.
    stage1:  adds the VAE-latent alignment loss at the guided layer.
    stage2:  adds the self-guided feature loss from a frozen teacher until
             the early-stop step, then reverts to the plain diffusion loss.
    """
    if mode not in ("baseline", "stage1", "stage2"):
        raise ConfigError(f"unknown training mode {mode!r}")
    set_deterministic(cfg.run.deterministic)
    run = cfg.run
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ds = load_dataset(cfg)
    codec, mu, sigma = load_codec(cfg)
    with torch.no_grad():
        latents = standardize(encode_dataset(codec, torch.from_numpy(ds.images)), mu, sigma)
    labels_all = torch.from_numpy(ds.labels)
    cache_path = out / "latent_cache"
    if not (cache_path / "manifest.json").is_file():
        write_latent_cache(cfg, codec, ds, mu, sigma, cache_path)

    stop_step = resolve_stop_step(cfg, len(ds)) if mode == "stage2" else 0
    lam = cfg.guidance.lambda_guide if mode == "stage2" else cfg.guidance.lambda_align
    mcfg = cfg.model

    model = build_model(mcfg, seed=derive_seed(run.seed, "model-init"))
    ema = build_model(mcfg, seed=derive_seed(run.seed, "model-init"))
    ema.load_state_dict(model.state_dict())
    for p in ema.parameters():
        p.requires_grad_(False)

    head: Optional[ProjectionHead] = None
    teacher: Optional[GuideTeacher] = None
    if mode == "stage1":
        out_dim = mcfg.patch_size**2 * mcfg.latent_channels
        head = build_head(mcfg.hidden_dim, out_dim, seed=derive_seed(run.seed, "head-init"))
    elif mode == "stage2":
        if not cfg.guidance.guide_checkpoint:
            raise ConfigError("guidance.guide_checkpoint is required for stage2 training")
        teacher = load_frozen_guide(cfg.guidance.guide_checkpoint)
        tcfg = teacher.config
        arch = ("depth", "hidden_dim", "heads", "patch_size", "latent_channels", "latent_size", "num_classes")
        if any(getattr(tcfg, k) != getattr(mcfg, k) for k in arch):
            raise ConfigError(
                "guiding checkpoint architecture does not match the student model config"
            )
        head = build_head(mcfg.hidden_dim, tcfg.hidden_dim, seed=derive_seed(run.seed, "head-init"))

    params = list(model.parameters()) + (list(head.parameters()) if head is not None else [])
    opt = make_optimizer(params, cfg)

    start_step = 0
    trace = LossTrace(out / "trace.csv")
    if resume:
        latest = _latest_resumable(out, run.total_steps)
        if latest is not None:
            start_step = _load_train_checkpoint(load_archive(latest), model, ema, head, opt)
            if trace.path.is_file():
                for row in read_trace(trace.path):
                    if row["step"] < start_step:
                        trace.rows.append(
                            (
                                row["step"],
                                row["l_diff"],
                                row["l_guide"],
                                row["lambda_effective"],
                                row["iter_rate"],
                            )
                        )

    teacher_hash = teacher.parameters_hash() if teacher is not None else ""
    guided_layer = cfg.guidance.guided_layer
    n = len(ds)
    window_start = time.monotonic()
    window_steps = 0
    extra = {
        "mode": mode,
        "stop_step": stop_step,
        "steps_per_epoch": steps_per_epoch(n, run.batch_size),
        "teacher_hash": teacher_hash,
        "teacher_checkpoint": cfg.guidance.guide_checkpoint if mode == "stage2" else "",
    }

    for step in range(start_step, run.total_steps):
        idx = batch_indices(n, run.batch_size, run.seed, step)
        z = latents[idx]
        labels = labels_all[idx]
        b = z.shape[0]
        t = sample_timesteps(b, derive_seed(run.seed, "t", step))
        eps = torch.randn(z.shape, generator=torch.Generator().manual_seed(derive_seed(run.seed, "eps", step)))
        cond = apply_condition_dropout(
            labels, mcfg.cond_dropout_prob, derive_seed(run.seed, "drop", step), mcfg.null_class
        )
        state = forward_interpolate(z, eps, t)
        v_tgt = velocity_target(z, eps)

        need_align = mode == "stage1" and lam > 0
        active = mode == "stage2" and guidance_active(step, stop_step)
        taps = (guided_layer,) if (need_align or active) else ()
        v_pred, features = model.forward_with_taps(state, cond, tap_layers=taps)
        l_diff = diffusion_loss(v_pred, v_tgt)

        l_aux = 0.0
        if need_align:
            l_aux = vae_align_loss(features[guided_layer], head, z)
            loss = combined_loss(l_diff, l_aux, lam, active=True)
            lambda_eff = lam
        elif active:
            f_g = extract_guided_feature(
                teacher, state, labels, cfg.guidance.guiding_layer, cfg.guidance.omega
            )
            l_aux = guide_loss(features[guided_layer], head, f_g)
            loss = combined_loss(l_diff, l_aux, lam, active=True)
            lambda_eff = lam
        else:
            loss = combined_loss(l_diff, 0.0, lam, active=False)
            lambda_eff = 0.0

        if not torch.isfinite(loss):
            _save_train_checkpoint(
                out, "ckpt_abort", cfg, mode, step, model, ema, head, opt, extra
            )
            trace.write()
            raise NumericError(
                f"training loss became non-finite at step {step}; "
                f"last-good checkpoint saved to {out / 'ckpt_abort'}"
            )

        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(ema, model, run.ema_decay)

        window_steps += 1
        if run.deterministic:
            rate = 0.0  # wall-clock excluded so traces are reproducible
        else:
            elapsed = time.monotonic() - window_start
            rate = window_steps / elapsed if elapsed > 0 else 0.0
        trace.append(step, float(l_diff), float(l_aux), float(lambda_eff), rate)

        done = step + 1
        if run.checkpoint_every > 0 and done % run.checkpoint_every == 0 and done < run.total_steps:
            _save_train_checkpoint(out, f"ckpt_step{done:08d}", cfg, mode, done, model, ema, head, opt, extra)
            trace.write()

    if teacher is not None and teacher.parameters_hash() != teacher_hash:
        raise NumericError("frozen teacher parameters changed during training")

    final = _save_train_checkpoint(
        out, "ckpt_final", cfg, mode, run.total_steps, model, ema, head, opt, extra
    )
    trace_path = trace.write()
    return TrainResult(checkpoint=final, trace=trace_path, steps=run.total_steps, stop_step=stop_step)


def load_model_from_archive(path: Union[str, Path], prefer_ema: bool = True) -> LatentTransformer:
    from .backbone import model_config_from_dict

    archive = load_archive(path)
    mcfg = model_config_from_dict(archive.manifest["config"]["model"])
    model = build_model(mcfg, seed=0)
    prefix = "ema." if prefer_ema and any(n.startswith("ema.") for n in archive.tensor_names) else "model."
    load_module_tensors(model, archive, prefix)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
