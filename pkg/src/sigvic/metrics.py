"""Image quality metrics: PSNR and multi-scale SSIM.

Both work on ``(B, C, H, W)`` (or ``(C, H, W)``) tensors in [0, 1].  MS-SSIM
is differentiable so it can serve as a training distortion.
"""

from __future__ import annotations

import math
import warnings

import torch
import torch.nn.functional as F

DB_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    return x, x_hat


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    x, x_hat = _check_pair(x, x_hat)
    return F.mse_loss(x_hat, x)


def psnr(x, x_hat) -> float:
    """PSNR in dB for [0, 1] images, capped at 100 dB."""
    err = float(mse(torch.as_tensor(x, dtype=torch.float64), torch.as_tensor(x_hat, dtype=torch.float64)))
    if err < 1e-10:
        return DB_CAP
    return -10.0 * math.log10(err)


def msssim_db(v: float) -> float:
    """``-10 log10(1 - v)``, capped at 100 dB."""
    if 1.0 - v <= 10 ** (-DB_CAP / 10):
        return DB_CAP
    return -10.0 * math.log10(1.0 - v)


def _gauss_window(dtype, device) -> torch.Tensor:
    coords = torch.arange(WIN_SIZE, dtype=dtype, device=device) - WIN_SIZE // 2
    g = torch.exp(-(coords**2) / (2 * WIN_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, win.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, win.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c1, c2 = K1**2, K2**2
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(x * x, win) - mu_xx
    s_yy = _blur(y * y, win) - mu_yy
    s_xy = _blur(x * y, win) - mu_xy
    cs = (2 * s_xy + c2) / (s_xx + s_yy + c2)
    ssim = (2 * mu_xy + c1) / (mu_xx + mu_yy + c1) * cs
    return ssim.mean(dim=(2, 3)), cs.mean(dim=(2, 3))


def msssim_levels(height: int, width: int) -> int:
    """Pyramid depth usable for an image of this size (5 for >= 161 px)."""
    side = min(height, width)
    levels = 0
    while levels < len(MSSSIM_WEIGHTS) and side > (WIN_SIZE - 1) * 2**levels:
        levels += 1
    return levels


def ms_ssim(x: torch.Tensor, x_hat: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Five-scale MS-SSIM with the standard weights.

    Images too small for five scales use fewer, with the leading weights
    renormalized to sum to one (a warning is issued).  Returns the batch mean
    unless ``reduce=False``.
    """
    x, x_hat = _check_pair(x, x_hat)
    levels = msssim_levels(*x.shape[-2:])
    if levels == 0:
        raise ValueError(f"images of size {tuple(x.shape[-2:])} are smaller than the SSIM window")
    weights = torch.tensor(MSSSIM_WEIGHTS[:levels], dtype=x.dtype, device=x.device)
    if levels < len(MSSSIM_WEIGHTS):
        warnings.warn(f"MS-SSIM reduced to {levels} scales for {tuple(x.shape[-2:])} images", stacklevel=2)
        weights = weights / weights.sum()
    win = _gauss_window(x.dtype, x.device)
    factors = []
    for level in range(levels):
        ssim, cs = _ssim_terms(x, x_hat, win)
        if level < levels - 1:
            factors.append(F.relu(cs))
            pad = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            x_hat = F.avg_pool2d(x_hat, 2, padding=pad)
    factors.append(F.relu(ssim))
    stacked = torch.stack(factors, dim=0)
    value = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean(dim=1)
    return value.mean() if reduce else value
