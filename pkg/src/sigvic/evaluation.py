"""RD sweeps, scale-factor / bit-allocation maps and the ablation harness."""

from __future__ import annotations

import copy
import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bd import RDCurve, RDPoint, bd_metrics, write_rd_csv
from .codec import SigVIC, compress, decompress
from .config import CodecConfig
from .entropy import likelihood
from .errors import ConfigurationError
from .metrics import ms_ssim, msssim_db, psnr
from .training import TrainConfig, train

SCHEMES = {
    # name: (SSN, SGU, SFFM)
    "A": (True, False, False),
    "B": (True, True, False),
    "C": (True, True, True),
}


def stream_bpp(stream: bytes, height: int, width: int) -> float:
    return 8.0 * len(stream) / (height * width)


def quality(x: torch.Tensor, x_hat: torch.Tensor, metric: str = "psnr") -> float:
    if metric == "psnr":
        return psnr(x, x_hat)
    if metric == "msssim":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return msssim_db(float(ms_ssim(x.double(), x_hat.double())))
    raise ConfigurationError(f"unknown quality metric {metric!r}")


def sweep_rd(
    model: SigVIC,
    images: Sequence[torch.Tensor],
    lambdas: Sequence[float],
    metric: str = "psnr",
    label: str = "",
) -> RDCurve:
    """Average real-bitstream bpp and quality per lambda over ``images``."""
    if len(images) == 0:
        raise ValueError("sweep_rd needs at least one image")
    unique = sorted(set(float(v) for v in lambdas))
    if len(unique) < len(lambdas):
        warnings.warn("duplicate lambda values dropped from the sweep", stacklevel=2)
    model.eval()
    points = []
    for lam in unique:
        rates, quals = [], []
        for x in images:
            h, w = x.shape[-2:]
            stream = compress(x, lam, model)
            x_hat = decompress(stream, model)
            rates.append(stream_bpp(stream, h, w))
            quals.append(quality(x, x_hat, metric))
        points.append(RDPoint(float(np.mean(rates)), float(np.mean(quals)), f"lambda={lam:g}", lam))
    return RDCurve(points, label)


def plot_rd_curves(curves: Sequence[RDCurve], path: str | Path, ylabel: str = "PSNR (dB)") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.bpp, c.quality, "o-", label=c.label or "codec")
    ax.set_xlabel("bpp")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- heatmaps -----------------------------------------------------------------


@dataclass
class HeatmapBundle:
    lam: float
    encoder_scales: list[np.ndarray]
    decoder_scales: list[np.ndarray]
    bit_map: np.ndarray
    latent_bits: np.ndarray
    total_bits: float
    files: list[Path] = field(default_factory=list)


def spread_bits(latent_bits: np.ndarray, height: int, width: int, factor: int) -> np.ndarray:
    """Distribute each latent cell's bits evenly over the image pixels it covers.

    Cells overlapping the padded border only share among real pixels, so the
    map sums to the latent total.
    """
    out = np.zeros((height, width))
    for i in range(latent_bits.shape[0]):
        r0, r1 = i * factor, min((i + 1) * factor, height)
        for j in range(latent_bits.shape[1]):
            c0, c1 = j * factor, min((j + 1) * factor, width)
            out[r0:r1, c0:c1] = latent_bits[i, j] / ((r1 - r0) * (c1 - c0))
    return out


def _save_heatmap(arr: np.ndarray, stem: Path) -> list[Path]:
    from matplotlib import colormaps
    from PIL import Image

    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    rgba = colormaps["viridis"](norm)
    # the stem carries a decimal lambda, so append rather than with_suffix
    png, txt = stem.parent / f"{stem.name}.png", stem.parent / f"{stem.name}.csv"
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(png)
    np.savetxt(txt, arr, delimiter=",", fmt="%.9g")
    return [png, txt]


@torch.no_grad()
def dump_maps(model: SigVIC, image: torch.Tensor, lam: float, out_dir: str | Path | None = None) -> HeatmapBundle:
    """Scale factors of every stage and the per-pixel bit allocation of ``ys_hat``.

    With ``out_dir`` set, writes false-colour PNGs and CSV sidecars there.
    """
    model.eval()
    x = image.unsqueeze(0) if image.dim() == 3 else image
    h, w = x.shape[-2:]
    out = model(x.to(model.z_mu.dtype), lam, mode="infer")
    p = out["y_params"]
    bits = -torch.log2(likelihood(out["ys_hat"], p.mu, p.sigma))
    latent_bits = bits.sum(dim=(0, 1)).double().numpy()
    bundle = HeatmapBundle(
        lam=lam,
        encoder_scales=[sf[0, 0].double().numpy() for sf in out["bundle"].scale_maps],
        decoder_scales=[sf[0, 0].double().numpy() for sf in out["dec_scale_maps"]],
        bit_map=spread_bits(latent_bits, h, w, model.config.factor),
        latent_bits=latent_bits,
        total_bits=float(out["y_bits"]),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = f"lambda{lam:g}"
        for i, sf in enumerate(bundle.encoder_scales):
            bundle.files += _save_heatmap(sf, out_dir / f"{tag}_enc_scale_stage{i + 1}")
        for i, sf in enumerate(bundle.decoder_scales):
            bundle.files += _save_heatmap(sf, out_dir / f"{tag}_dec_scale_stage{i + 1}")
        bundle.files += _save_heatmap(bundle.bit_map, out_dir / f"{tag}_bit_allocation")
    return bundle


# -- ablation -------------------------------------------------------------------


@dataclass
class SchemeResult:
    name: str
    ssn: bool
    sgu: bool
    sffm: bool
    params: int
    curve: RDCurve
    bd_rate_vs_a: float | None = None
    bd_psnr_vs_a: float | None = None
    note: str = ""


@dataclass
class AblationReport:
    schemes: list[SchemeResult]
    lambdas: list[float]
    budget: TrainConfig

    HEADER = ("scheme", "ssn", "sgu", "sffm", "params", "bd_rate_vs_A_pct", "bd_psnr_vs_A_db", "note")

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for s in self.schemes:
                w.writerow([
                    s.name, int(s.ssn), int(s.sgu), int(s.sffm), s.params,
                    "" if s.bd_rate_vs_a is None else f"{s.bd_rate_vs_a:.4f}",
                    "" if s.bd_psnr_vs_a is None else f"{s.bd_psnr_vs_a:.4f}",
                    s.note,
                ])

    @staticmethod
    def read_flags(path: str | Path) -> dict[str, tuple[bool, bool, bool]]:
        with open(path, newline="") as fh:
            return {
                row["scheme"]: (row["ssn"] == "1", row["sgu"] == "1", row["sffm"] == "1")
                for row in csv.DictReader(fh)
            }


def scheme_config(base: CodecConfig, name: str) -> CodecConfig:
    _, sgu, sffm = SCHEMES[name]
    cfg = copy.deepcopy(base)
    cfg.use_sgu, cfg.use_sffm, cfg.topk_indices = sgu, sffm, None
    return cfg


def ablation_run(
    train_images: Sequence[torch.Tensor],
    test_images: Sequence[torch.Tensor],
    base: CodecConfig,
    budget: TrainConfig,
    lambdas: Sequence[float],
    schemes: Sequence[str] = ("A", "B", "C"),
    out_dir: str | Path | None = None,
) -> AblationReport:
    """Train every scheme with the same seed and budget, then compare against A."""
    lambdas = sorted(set(float(v) for v in lambdas))
    if len(lambdas) < 4:
        raise ConfigurationError(f"{len(lambdas)} lambda values cannot give the 4 RD points BD metrics need")
    if "A" not in schemes:
        raise ConfigurationError("scheme A is the BD anchor and must be included")
    results = []
    for name in schemes:
        torch.manual_seed(budget.seed)
        model = SigVIC(scheme_config(base, name))
        log = Path(out_dir) / f"train_{name}.csv" if out_dir is not None else None
        if log is not None:
            log.parent.mkdir(parents=True, exist_ok=True)
        train(model, train_images, budget, log_path=log)
        curve = sweep_rd(model, test_images, lambdas, label=f"scheme {name}")
        ssn, sgu, sffm = SCHEMES[name]
        results.append(SchemeResult(name, ssn, sgu, sffm, sum(p.numel() for p in model.parameters()), curve))
    anchor = next(r for r in results if r.name == "A")
    for r in results:
        try:
            r.bd_rate_vs_a, r.bd_psnr_vs_a = bd_metrics(anchor.curve, r.curve)
        except ValueError as exc:
            r.note = str(exc)
    report = AblationReport(results, lambdas, budget)
    if out_dir is not None:
        report.write(Path(out_dir) / "ablation.csv")
        write_rd_csv([r.curve for r in results], Path(out_dir) / "ablation_rd.csv")
    return report


def finite_mean(values) -> float:
    arr = np.asarray(values, dtype=float)
    return float(arr[np.isfinite(arr)].mean()) if np.isfinite(arr).any() else math.nan
