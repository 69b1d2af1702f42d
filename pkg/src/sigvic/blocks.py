"""Spatial-importance building blocks: SGU, SSN, RCAB and SFFM.

Every block exists twice: as a pure function of ``(inputs, params)`` where
``params`` is a flat mapping of named tensors, and as an ``nn.Module`` that
owns those tensors under the same names and simply calls the function.  The
functional form is what the tests poke at with hand-set weights; the modules
are what the codec is assembled from.

Feature maps use the torch layout ``(B, C, H, W)``.
"""

from __future__ import annotations

import math
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError

Params = Mapping[str, torch.Tensor]

# exp() of the SSN output is taken on a clamped log-scale so the result stays
# strictly positive and finite in float32.
LOG_SCALE_LIMIT = 60.0


def _conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None, stride: int = 1) -> torch.Tensor:
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    return F.conv2d(x, w, b, stride=stride, padding=w.shape[-1] // 2)


def _sub(params: Params, prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _unit_interval(p: torch.Tensor) -> torch.Tensor:
    info = torch.finfo(p.dtype)
    return p.clamp(info.tiny, 1.0 - info.eps)


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def sgu_forward(f: torch.Tensor, params: Params) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial gating unit.

    The mask branch is ``sigmoid(conv1x1(conv3x3(f)))``; the gate branch is an
    independent 3x3 convolution.  Returns ``(mask * gate(f) + f, mask)``.

    Expected keys: ``mask3_w, mask3_b, mask1_w, mask1_b, gate3_w, gate3_b``.
    """
    p = params
    logits = _conv(_conv(f, p["mask3_w"], p["mask3_b"]), p["mask1_w"], p["mask1_b"])
    mask = _unit_interval(torch.sigmoid(logits))
    gated = _conv(f, p["gate3_w"], p["gate3_b"])
    if gated.shape != f.shape:
        raise ConfigurationError(f"gate branch maps {tuple(f.shape)} to {tuple(gated.shape)}")
    return mask * gated + f, mask


def aggregate_mask(mask: torch.Tensor) -> torch.Tensor:
    """Channel mean of an importance mask, ``(B, N, H, W) -> (B, 1, H, W)``."""
    if mask.dim() != 4 or mask.shape[1] < 1:
        raise ConfigurationError(f"expected a (B, N, H, W) mask, got {tuple(mask.shape)}")
    return mask.mean(dim=1, keepdim=True)


def build_rd_map(
    lambda_val: float,
    height: int,
    width: int,
    batch: int = 1,
    *,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str | None = None,
) -> torch.Tensor:
    """Tile a scalar lambda into a constant ``(batch, 1, H, W)`` map."""
    if not (lambda_val > 0 and math.isfinite(lambda_val)):
        raise DomainError(f"lambda must be positive and finite, got {lambda_val}")
    if height < 1 or width < 1:
        raise ConfigurationError(f"invalid map size {height}x{width}")
    return torch.full((batch, 1, height, width), float(lambda_val), dtype=dtype, device=device)


def ssn_forward(si_map: torch.Tensor, rd_map: torch.Tensor, params: Params) -> torch.Tensor:
    """Spatial scaling network: ``exp(MLP([si_map, rd_map]))`` at every pixel.

    The MLP (2 -> hidden -> ReLU -> 1) is shared across locations, so it is
    run as a pair of 1x1 convolutions.

    Expected keys: ``fc1_w (hidden, 2), fc1_b, fc2_w (1, hidden), fc2_b``.
    """
    if si_map.shape != rd_map.shape or si_map.shape[1] != 1:
        raise ConfigurationError(
            f"si_map {tuple(si_map.shape)} and rd_map {tuple(rd_map.shape)} must both be (B, 1, H, W)"
        )
    p = params
    x = torch.cat([si_map, rd_map], dim=1)
    h = F.relu(F.conv2d(x, p["fc1_w"][:, :, None, None], p["fc1_b"]))
    log_sf = F.conv2d(h, p["fc2_w"][:, :, None, None], p["fc2_b"])
    return torch.exp(log_sf.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT))


def apply_scale(f_g: torch.Tensor, sf: torch.Tensor) -> torch.Tensor:
    """Scale every channel of ``f_g`` by the per-pixel factor ``sf``."""
    if sf.shape[1] != 1 or sf.shape[0] != f_g.shape[0] or sf.shape[2:] != f_g.shape[2:]:
        raise ConfigurationError(
            f"scale map {tuple(sf.shape)} does not broadcast over features {tuple(f_g.shape)}"
        )
    return f_g * sf


def channel_attention(x: torch.Tensor, params: Params) -> torch.Tensor:
    p = params
    pooled = x.mean(dim=(2, 3))
    hidden = F.relu(F.linear(pooled, p["fc_down_w"], p["fc_down_b"]))
    weights = torch.sigmoid(F.linear(hidden, p["fc_up_w"], p["fc_up_b"]))
    return x * weights[:, :, None, None]


def rcab_forward(f: torch.Tensor, params: Params) -> torch.Tensor:
    """Residual channel attention block, ``f + CA(conv(relu(conv(f))))``.

    Expected keys: ``conv1_w, conv1_b, conv2_w, conv2_b, fc_down_w, fc_down_b,
    fc_up_w, fc_up_b``.
    """
    p = params
    c = f.shape[1]
    if p["fc_down_w"].shape[1] != c or p["fc_up_w"].shape[0] != c:
        raise ConfigurationError(f"attention weights do not match {c} channels")
    body = _conv(F.relu(_conv(f, p["conv1_w"], p["conv1_b"])), p["conv2_w"], p["conv2_b"])
    return f + channel_attention(body, p)


def sffm_forward(decoded: torch.Tensor, shallow: torch.Tensor, params: Params) -> torch.Tensor:
    """Shallow feature fusion: a two-level U-net residual on the decoded features.

    ``decoded + tail(U(head([decoded, shallow])))``.  Level one works at the
    input resolution, level two at half of it; each level runs a stack of
    RCABs and the upsampled second level is added back onto the first.

    Expected keys: ``head_w/b``, ``level1.<i>.*``, ``down_w/b``,
    ``level2.<i>.*``, ``up_w/b`` (transposed conv), ``tail_w/b``.
    """
    if decoded.shape[2:] != shallow.shape[2:]:
        raise ConfigurationError(
            f"decoded {tuple(decoded.shape)} and shallow {tuple(shallow.shape)} differ spatially"
        )
    p = params
    h = _conv(torch.cat([decoded, shallow], dim=1), p["head_w"], p["head_b"])
    skip = _rcab_stack(h, p, "level1.")
    low = F.leaky_relu(_conv(skip, p["down_w"], p["down_b"], stride=2), 0.01)
    low = _rcab_stack(low, p, "level2.")
    up = F.conv_transpose2d(low, p["up_w"], p["up_b"], stride=2, padding=1)
    if up.shape != skip.shape:
        raise RuntimeError(f"U-net stride bookkeeping broke: {tuple(up.shape)} vs {tuple(skip.shape)}")
    return decoded + _conv(up + skip, p["tail_w"], p["tail_b"])


def _rcab_stack(x: torch.Tensor, params: Params, prefix: str) -> torch.Tensor:
    i = 0
    while f"{prefix}{i}.conv1_w" in params:
        x = rcab_forward(x, _sub(params, f"{prefix}{i}."))
        i += 1
    return x


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


def fan_in_uniform(*shape: int, fan_in: int | None = None) -> nn.Parameter:
    """Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if fan_in is None:
        fan_in = math.prod(shape[1:])
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


def zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape))


class _Functional(nn.Module):
    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


class SGU(_Functional):
    def __init__(self, channels: int):
        super().__init__()
        self.mask3_w = fan_in_uniform(channels, channels, 3, 3)
        self.mask3_b = zeros(channels)
        self.mask1_w = fan_in_uniform(channels, channels, 1, 1)
        self.mask1_b = zeros(channels)
        self.gate3_w = fan_in_uniform(channels, channels, 3, 3)
        self.gate3_b = zeros(channels)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return sgu_forward(f, self.params())


class SSN(_Functional):
    """Per-pixel MLP from (importance, lambda) to a positive scale factor.

    The output layer starts at zero so a fresh network scales by exactly 1.
    """

    def __init__(self, hidden: int = 64):
        super().__init__()
        self.fc1_w = fan_in_uniform(hidden, 2)
        self.fc1_b = zeros(hidden)
        self.fc2_w = zeros(1, hidden)
        self.fc2_b = zeros(1)

    def forward(self, si_map: torch.Tensor, rd_map: torch.Tensor) -> torch.Tensor:
        return ssn_forward(si_map, rd_map, self.params())


class RCAB(_Functional):
    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 3):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"reduction {reduction} does not divide {channels} channels")
        mid = channels // reduction
        k = kernel_size
        self.conv1_w = fan_in_uniform(channels, channels, k, k)
        self.conv1_b = zeros(channels)
        self.conv2_w = fan_in_uniform(channels, channels, k, k)
        self.conv2_b = zeros(channels)
        self.fc_down_w = fan_in_uniform(mid, channels)
        self.fc_down_b = zeros(mid)
        self.fc_up_w = fan_in_uniform(channels, mid)
        self.fc_up_b = zeros(channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return rcab_forward(f, self.params())


class SFFM(_Functional):
    """U-shaped shallow feature fusion module.

    Args:
        channels: channel count of the decoded features (also the output).
        shallow_channels: channel count of the restored shallow features.
        width: internal U-net width.
        reduction: RCAB attention reduction ratio; must divide ``width``.
        blocks_per_level: RCABs at each of the two levels.
    """

    def __init__(
        self,
        channels: int,
        shallow_channels: int,
        width: int = 64,
        reduction: int = 16,
        blocks_per_level: int = 2,
    ):
        super().__init__()
        self.head_w = fan_in_uniform(width, channels + shallow_channels, 3, 3)
        self.head_b = zeros(width)
        self.level1 = nn.ModuleList(RCAB(width, reduction) for _ in range(blocks_per_level))
        self.down_w = fan_in_uniform(width, width, 3, 3)
        self.down_b = zeros(width)
        self.level2 = nn.ModuleList(RCAB(width, reduction) for _ in range(blocks_per_level))
        self.up_w = fan_in_uniform(width, width, 4, 4, fan_in=width * 4)
        self.up_b = zeros(width)
        # zero tail: the module is the identity on `decoded` until trained
        self.tail_w = zeros(channels, width, 3, 3)
        self.tail_b = zeros(channels)

    def forward(self, decoded: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
        return sffm_forward(decoded, shallow, self.params())
