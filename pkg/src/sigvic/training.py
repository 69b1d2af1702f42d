"""Lambda-conditioned rate-distortion training and Top-K calibration."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import SigVIC, pad_to_multiple, save_model, select_topk_channels
from .config import CodecConfig, LambdaSpec
from .data import CropSampler, prefetch
from .errors import ConfigurationError
from .metrics import ms_ssim, mse

__all__ = [
    "LambdaSpec",
    "TrainConfig",
    "TrainRecord",
    "TrainingDiverged",
    "sample_lambda",
    "rd_loss",
    "distortion",
    "lr_at",
    "train_step",
    "calibrate_topk",
    "train",
    "smoke_configs",
]

RECORD_HEADER = ("iter", "lambda", "loss", "bpp", "distortion", "seconds")


@dataclass
class TrainConfig:
    batch_size: int = 8
    crop: int = 256
    iters: int = 20_000
    lr: float = 1e-4
    lr_final: float = 1e-5
    lr_drop_frac: float = 0.05
    calibrate_frac: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for f in ("batch_size", "crop", "iters", "lr", "lr_final"):
            if getattr(self, f) <= 0:
                raise ConfigurationError(f"{f} must be positive")
        if self.lr_final >= self.lr:
            raise ConfigurationError("lr_final must be below lr")
        if not 0 <= self.lr_drop_frac < 1 or not 0 <= self.calibrate_frac < 1:
            raise ConfigurationError("fractions must lie in [0, 1)")


@dataclass
class TrainRecord:
    iter: int
    lam: float
    loss: float
    bpp: float
    distortion: float
    seconds: float

    def row(self) -> list:
        return [self.iter, f"{self.lam:.8g}", f"{self.loss:.8g}", f"{self.bpp:.8g}",
                f"{self.distortion:.8g}", f"{self.seconds:.4f}"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, record: TrainRecord):
        super().__init__(f"non-finite loss at iteration {record.iter}: {record}")
        self.record = record


def sample_lambda(spec: LambdaSpec, u: float) -> float:
    """Log-uniform draw from the lambda range driven by ``u`` in [0, 1]."""
    lo, hi = math.log(spec.lambda_min), math.log(spec.lambda_max)
    lam = math.exp(lo + u * (hi - lo))
    # exp/log round-off must not leave the closed range
    return min(max(lam, spec.lambda_min), spec.lambda_max)


def distortion(x: torch.Tensor, x_hat: torch.Tensor, metric: str = "mse") -> torch.Tensor:
    """``255^2 * MSE`` or ``1 - MS-SSIM`` on [0, 1] images."""
    if metric == "mse":
        return 255.0**2 * mse(x, x_hat)
    if metric == "msssim":
        return 1.0 - ms_ssim(x, x_hat)
    raise ConfigurationError(f"unknown metric {metric!r}")


def rd_loss(x: torch.Tensor, x_hat: torch.Tensor, bpp, lam: float, metric: str = "mse") -> torch.Tensor:
    """Rate plus lambda-weighted distortion."""
    return bpp + lam * distortion(x, x_hat, metric)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.lr_final if iteration >= (1.0 - cfg.lr_drop_frac) * cfg.iters else cfg.lr


def train_step(
    model: SigVIC,
    batch: torch.Tensor,
    spec: LambdaSpec,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    generator: torch.Generator,
    iteration: int = 0,
    clip_norm: float = 1.0,
) -> TrainRecord:
    """One optimizer step at a freshly sampled lambda (shared by the whole batch)."""
    t0 = time.perf_counter()
    model.train()
    lam = sample_lambda(spec, float(rng.random()))
    out = model(batch, lam, mode="train", generator=generator)
    d = distortion(batch, out["x_hat"], spec.metric)
    loss = out["bpp"] + lam * d
    record = TrainRecord(iteration, lam, loss.item(), out["bpp"].item(), d.item(), 0.0)
    if not math.isfinite(record.loss):
        raise TrainingDiverged(record)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    record.seconds = time.perf_counter() - t0
    return record


@torch.no_grad()
def channel_activity(model: SigVIC, images: Sequence[torch.Tensor]) -> np.ndarray:
    """Mean absolute activation of each shallow channel over ``images``."""
    if len(images) == 0:
        raise ConfigurationError("calibration set is empty")
    spec = model.lambda_range
    lam = math.sqrt(spec.lambda_min * spec.lambda_max)
    total = None
    for im in images:
        x = pad_to_multiple(im.unsqueeze(0) if im.dim() == 3 else im, model.config.factor)
        act = model.analyze(x.to(model.z_mu.dtype), lam).shallow_full.abs().mean(dim=(0, 2, 3))
        total = act if total is None else total + act
    return (total / len(images)).double().cpu().numpy()


def calibrate_topk(model: SigVIC, images: Sequence[torch.Tensor]) -> list[int]:
    """Freeze the K most active shallow channels into the model."""
    indices = select_topk_channels(channel_activity(model, images), model.config.K)
    model.set_topk(indices)
    return indices


def train(
    model: SigVIC,
    images: Sequence[torch.Tensor],
    cfg: TrainConfig,
    spec: LambdaSpec | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    calibration_images: Sequence[torch.Tensor] | None = None,
    progress: Callable[[TrainRecord], None] | None = None,
) -> list[TrainRecord]:
    """Train for ``cfg.iters`` steps; calibrates Top-K at ``calibrate_frac`` of the budget."""
    spec = spec or model.lambda_range
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = CropSampler(images, cfg.crop, seed=cfg.seed + 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    calib_at = int(cfg.calibrate_frac * cfg.iters) if cfg.calibrate_frac > 0 else -1
    calib_set = list(calibration_images if calibration_images is not None else images[:64])

    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        writer = csv.writer(log)
        writer.writerow(RECORD_HEADER)
    records: list[TrainRecord] = []
    try:
        for it, batch in enumerate(prefetch(sampler, cfg.batch_size, cfg.iters)):
            if it == calib_at:
                calibrate_topk(model, calib_set)
            for group in optimizer.param_groups:
                group["lr"] = lr_at(it, cfg)
            rec = train_step(model, batch, spec, optimizer, rng, gen, it, cfg.clip_norm)
            records.append(rec)
            if log is not None:
                writer.writerow(rec.row())
                if it % cfg.log_every == 0:
                    log.flush()
            if progress is not None:
                progress(rec)
            if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_model(model, Path(checkpoint_dir) / f"checkpoint_{it + 1:06d}.npz")
    finally:
        if log is not None:
            log.close()
    model.eval()
    return records


def smoke_configs() -> tuple[CodecConfig, TrainConfig]:
    """Desk-scale architecture and schedule used by the acceptance runs."""
    codec = CodecConfig(N=32, K=8, sffm_width=16, reduction=4)
    # a 100x shorter budget than full scale needs the larger step to move at all
    train_cfg = TrainConfig(batch_size=8, crop=64, iters=20_000, lr=1e-3, lr_final=1e-4)
    return codec, train_cfg


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
