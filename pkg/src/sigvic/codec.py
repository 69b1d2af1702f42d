"""The full variable-rate codec: transforms, hyperprior and (de)compression.

Encoder stage::

    conv5x5/2 -> leaky -> SGU -> SSN(si_map, rd_map) -> scale

Decoder stage (mirror order)::

    SGU -> SSN(si_map, rd_map) -> scale -> deconv5x5/2 -> leaky

The first encoder stage's activations are the shallow source.  K calibrated
channels of it are downsampled to the latent grid, concatenated with ``y``
and coded jointly; the decoder upsamples them back to image resolution for
the SFFM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blocks
from .bitstream import Bitstream
from .blocks import SFFM, SGU, SSN
from .config import CodecConfig
from .entropy import (
    SIGMA_FLOOR,
    GaussianParams,
    entropy_decode,
    entropy_encode,
    estimate_rate,
    quantize,
)
from .errors import ConfigurationError, ContainerError, DomainError

LEAK = 0.01


def conv(cin: int, cout: int, k: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def deconv(cin: int, cout: int, k: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


def _init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.zeros_(m.bias)


def select_topk_channels(stats, k: int) -> list[int]:
    """Indices of the ``k`` largest statistics, ties to the lower index, ascending."""
    stats = np.asarray(stats, dtype=np.float64).ravel()
    if not 1 <= k <= stats.size:
        raise ConfigurationError(f"cannot select {k} of {stats.size} channels")
    order = np.lexsort((np.arange(stats.size), -stats))
    return sorted(order[:k].tolist())


def pad_to_multiple(x: torch.Tensor, factor: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


@dataclass
class LatentBundle:
    y: torch.Tensor
    shallow_k: torch.Tensor
    shallow_full: torch.Tensor
    scale_maps: list[torch.Tensor] = field(default_factory=list)
    masks: list[torch.Tensor] = field(default_factory=list)

    @property
    def ys(self) -> torch.Tensor:
        return torch.cat([self.y, self.shallow_k], dim=1)


class _Stage(nn.Module):
    def __init__(self, channels: int, use_sgu: bool, hidden: int):
        super().__init__()
        self.sgu = SGU(channels) if use_sgu else None
        self.ssn = SSN(hidden)

    def scale(self, f: torch.Tensor, level: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        b, _, h, w = f.shape
        if self.sgu is not None:
            f, mask = self.sgu(f)
            si_map = blocks.aggregate_mask(mask)
        else:
            mask = None
            si_map = torch.full((b, 1, h, w), 0.5, dtype=f.dtype, device=f.device)
        rd_map = blocks.build_rd_map(level, h, w, b, dtype=f.dtype, device=f.device)
        sf = self.ssn(si_map, rd_map)
        return blocks.apply_scale(f, sf), sf, mask


class SigVIC(nn.Module):
    """Spatial-importance guided variable-rate codec."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        cfg = config or CodecConfig()
        self.config = cfg
        n, k, s = cfg.N, cfg.K, cfg.stages

        self.enc_convs = nn.ModuleList(conv(3 if i == 0 else n, n) for i in range(s))
        self.enc_stages = nn.ModuleList(_Stage(n, cfg.use_sgu, cfg.ssn_hidden) for _ in range(s))
        self.shallow_down = nn.ModuleList(conv(k, k) for _ in range(s - 1))

        self.hyper_enc = nn.ModuleList([conv(n + k, n, 3, 1), conv(n, n), conv(n, n)])
        self.hyper_dec = nn.ModuleList([deconv(n, n), deconv(n, n), conv(n, 2 * (n + k), 3, 1)])
        self.z_mu = nn.Parameter(torch.zeros(n))
        self.z_sigma_raw = nn.Parameter(torch.zeros(n))

        self.dec_stages = nn.ModuleList(_Stage(n, cfg.use_sgu, cfg.ssn_hidden) for _ in range(s))
        self.dec_convs = nn.ModuleList(deconv(n, n) for _ in range(s))
        self.shallow_up = nn.ModuleList(deconv(k, k) for _ in range(s))
        self.sffm = SFFM(n, k, cfg.sffm_width, cfg.reduction) if cfg.use_sffm else None
        self.out_conv = conv(n, 3, 3, 1)
        _init(self)
        self.register_buffer("_topk", torch.tensor(self.topk_indices, dtype=torch.long), persistent=False)

    # -- metadata ---------------------------------------------------------

    @property
    def topk_indices(self) -> list[int]:
        idx = self.config.topk_indices
        return list(idx) if idx is not None else list(range(self.config.K))

    def set_topk(self, indices) -> None:
        self.config.topk_indices = tuple(int(i) for i in indices)
        self.config.__post_init__()
        self._topk = torch.tensor(self.topk_indices, dtype=torch.long, device=self.z_mu.device)

    @property
    def lambda_range(self):
        return self.config.lambda_range

    def rd_level(self, lam: float) -> float:
        """Value written into the rd map: 1 at the bottom of the lambda range, 2 at the top.

        Raw lambdas differ by a few hundredths, too little for the scale
        network to tell them apart at a sane learning rate, so the map
        carries the log-position of lambda in the trained range instead.
        """
        if not lam > 0:
            raise DomainError(f"lambda must be positive, got {lam}")
        spec = self.lambda_range
        lo, hi = math.log(spec.lambda_min), math.log(spec.lambda_max)
        if hi == lo:
            return 1.0
        return 1.0 + (math.log(lam) - lo) / (hi - lo)

    # -- transforms -------------------------------------------------------

    def analyze(self, x: torch.Tensor, lam: float) -> LatentBundle:
        """Image ``(B, 3, H, W)`` with H, W multiples of ``2**stages`` to latents."""
        f = x
        level = self.rd_level(lam)
        sfs, masks = [], []
        shallow = None
        for i, (c, stage) in enumerate(zip(self.enc_convs, self.enc_stages)):
            f = F.leaky_relu(c(f), LEAK)
            if i == 0:
                shallow = f
            f, sf, mask = stage.scale(f, level)
            sfs.append(sf)
            masks.append(mask)
        s = shallow.index_select(1, self._topk)
        for j, c in enumerate(self.shallow_down):
            s = c(s)
            if j < len(self.shallow_down) - 1:
                s = F.leaky_relu(s, LEAK)
        return LatentBundle(f, s, shallow, sfs, masks)

    def hyper_encode(self, ys: torch.Tensor) -> torch.Tensor:
        h = ys
        for j, c in enumerate(self.hyper_enc):
            h = c(h)
            if j < len(self.hyper_enc) - 1:
                h = F.leaky_relu(h, LEAK)
        return h

    def hyper_decode(self, z_hat: torch.Tensor, size: tuple[int, int] | None = None) -> GaussianParams:
        h = z_hat
        for j, c in enumerate(self.hyper_dec):
            h = c(h)
            if j < len(self.hyper_dec) - 1:
                h = F.leaky_relu(h, LEAK)
        if size is not None:
            h = h[:, :, : size[0], : size[1]]
        mu, raw = h.chunk(2, dim=1)
        return GaussianParams(mu, F.softplus(raw) + SIGMA_FLOOR)

    def z_prior(self, z_hat: torch.Tensor) -> GaussianParams:
        shape = (1, -1, 1, 1)
        mu = self.z_mu.view(shape).expand_as(z_hat)
        sigma = (F.softplus(self.z_sigma_raw) + SIGMA_FLOOR).view(shape).expand_as(z_hat)
        return GaussianParams(mu, sigma)

    def synthesize(self, ys_hat: torch.Tensor, lam: float, scale_maps: list | None = None) -> torch.Tensor:
        n = self.config.N
        f, s = ys_hat[:, :n], ys_hat[:, n:]
        level = self.rd_level(lam)
        for stage, c in zip(self.dec_stages, self.dec_convs):
            f, sf, _ = stage.scale(f, level)
            if scale_maps is not None:
                scale_maps.append(sf)
            f = F.leaky_relu(c(f), LEAK)
        for j, c in enumerate(self.shallow_up):
            s = c(s)
            if j < len(self.shallow_up) - 1:
                s = F.leaky_relu(s, LEAK)
        if self.sffm is not None:
            f = self.sffm(f, s)
        return self.out_conv(f)

    # -- end to end -------------------------------------------------------

    def forward(
        self,
        x: torch.Tensor,
        lam: float,
        mode: str = "train",
        generator: torch.Generator | None = None,
    ) -> dict:
        """Run the whole pipeline without producing a bitstream.

        ``mode="train"`` uses the additive-noise surrogate and returns the
        unclamped reconstruction; ``mode="infer"`` rounds, clamps to [0, 1]
        and follows exactly the arithmetic of :func:`decompress`.
        """
        lam = float(np.float32(lam))
        h, w = x.shape[-2:]
        xp = pad_to_multiple(x, self.config.factor)
        bundle = self.analyze(xp, lam)
        ys = bundle.ys
        z = self.hyper_encode(ys)
        z_hat = quantize(z, mode, generator)
        ys_hat = quantize(ys, mode, generator)
        y_params = self.hyper_decode(z_hat, ys.shape[-2:])
        z_bits = estimate_rate(z_hat, self.z_prior(z_hat))
        y_bits = estimate_rate(ys_hat, y_params)
        dec_maps: list = []
        x_hat = self.synthesize(ys_hat, lam, dec_maps)[..., :h, :w]
        if mode == "infer":
            x_hat = x_hat.clamp(0.0, 1.0)
        pixels = x.shape[0] * h * w
        return {
            "x_hat": x_hat,
            "bits": z_bits + y_bits,
            "z_bits": z_bits,
            "y_bits": y_bits,
            "bpp": (z_bits + y_bits) / pixels,
            "bundle": bundle,
            "z_hat": z_hat,
            "ys_hat": ys_hat,
            "y_params": y_params,
            "dec_scale_maps": dec_maps,
        }


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def latent_shapes(model: SigVIC, height: int, width: int) -> tuple[tuple, tuple]:
    """Shapes of (ys_hat, z_hat) for an image of the given size."""
    cfg = model.config
    hp, wp = _ceil_div(height, cfg.factor), _ceil_div(width, cfg.factor)
    hz, wz = _ceil_div(_ceil_div(hp, 2), 2), _ceil_div(_ceil_div(wp, 2), 2)
    return (1, cfg.N + cfg.K, hp, wp), (1, cfg.N, hz, wz)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected a single RGB image, got shape {tuple(x.shape)}")
    return x


def compress(x: torch.Tensor, lam: float, model: SigVIC) -> bytes:
    """Encode one image ``(3, H, W)`` in [0, 1] at tradeoff ``lam``."""
    model.lambda_range.check(lam)
    lam = float(np.float32(lam))
    x = _as_batch(x).to(model.z_mu.dtype)
    h, w = x.shape[-2:]
    with torch.no_grad():
        xp = pad_to_multiple(x, model.config.factor)
        bundle = model.analyze(xp, lam)
        ys = bundle.ys
        z_hat = quantize(model.hyper_encode(ys), "infer")
        z_payload = entropy_encode(z_hat, model.z_prior(z_hat))
        y_params = model.hyper_decode(z_hat, ys.shape[-2:])
        y_payload = entropy_encode(quantize(ys, "infer"), y_params)
    return Bitstream(w, h, lam, model.config.K, z_payload, y_payload).to_bytes()


def decode_latents(stream: Bitstream, model: SigVIC) -> tuple[torch.Tensor, torch.Tensor]:
    if stream.K != model.config.K:
        raise ContainerError(f"stream carries K={stream.K}, model expects K={model.config.K}")
    if stream.width < 1 or stream.height < 1:
        raise ContainerError("stream declares an empty image")
    ys_shape, z_shape = latent_shapes(model, stream.height, stream.width)
    dtype = model.z_mu.dtype
    with torch.no_grad():
        zeros = torch.zeros(z_shape, dtype=dtype)
        z_hat = torch.from_numpy(entropy_decode(stream.z_payload, model.z_prior(zeros), z_shape)).to(dtype)
        y_params = model.hyper_decode(z_hat, ys_shape[-2:])
        ys_hat = torch.from_numpy(entropy_decode(stream.y_payload, y_params, ys_shape)).to(dtype)
    return z_hat, ys_hat


def decompress(data: bytes, model: SigVIC) -> torch.Tensor:
    """Decode a stream produced by :func:`compress` to a ``(3, H, W)`` image."""
    stream = Bitstream.from_bytes(data)
    _, ys_hat = decode_latents(stream, model)
    with torch.no_grad():
        x_hat = model.synthesize(ys_hat, stream.lam)
    return x_hat[0, :, : stream.height, : stream.width].clamp(0.0, 1.0)


# -- model archive ----------------------------------------------------------

ARCHIVE_VERSION = 1


def save_model(model: SigVIC, path) -> None:
    """Write an ``.npz`` archive: one float array per parameter plus ``__meta__``.

    ``__meta__`` is a JSON document with the archive version and the
    :class:`CodecConfig` (including the frozen Top-K indices).  Arrays keep
    their dtype, so a save/load round trip is bit-exact.
    """
    meta = {"format": "sigvic-model", "version": ARCHIVE_VERSION, "config": model.config.to_dict()}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> SigVIC:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "sigvic-model" or meta.get("version") != ARCHIVE_VERSION:
            raise ConfigurationError(f"{path} is not a version-{ARCHIVE_VERSION} model archive")
        model = SigVIC(CodecConfig.from_dict(meta["config"]))
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    dtype = next(iter(state.values())).dtype
    model.to(dtype).load_state_dict(state)
    model.eval()
    return model
