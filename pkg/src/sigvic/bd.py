"""Rate-distortion curves and Bjontegaard deltas.

Both deltas fit a cubic through the four-or-more points of each curve in the
(log10 bpp, quality) plane and compare the integrals over the common range:

* BD-quality fits quality as a function of log-rate and reports the mean
  quality gap in dB;
* BD-rate fits log-rate as a function of quality and reports the mean rate
  change in percent (negative means the test curve saves bits).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    label: str = ""
    lam: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and self.bpp > 0 and math.isfinite(self.quality)):
            raise ValueError(f"invalid RD point ({self.bpp}, {self.quality})")


@dataclass
class RDCurve:
    """Points of one codec, kept sorted by bpp."""

    points: list[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def quality(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    def by_lambda(self) -> list[RDPoint]:
        return sorted(self.points, key=lambda p: (p.lam is None, p.lam))


def _check(curve: RDCurve, name: str) -> None:
    if len(curve) < 4:
        raise ValueError(f"{name} curve has {len(curve)} points; BD metrics need at least 4")
    if np.any(np.diff(curve.bpp) <= 0):
        raise ValueError(f"{name} curve must have strictly increasing bpp")


def _mean_gap(x1, y1, x2, y2) -> float:
    """Mean of cubic_fit2 - cubic_fit1 over the overlap of x1 and x2."""
    lo = max(np.min(x1), np.min(x2))
    hi = min(np.max(x1), np.max(x2))
    if not hi > lo:
        raise ValueError("the curves do not overlap; refusing to extrapolate")
    p1 = np.polyint(np.polyfit(x1, y1, 3))
    p2 = np.polyint(np.polyfit(x2, y2, 3))
    int1 = np.polyval(p1, hi) - np.polyval(p1, lo)
    int2 = np.polyval(p2, hi) - np.polyval(p2, lo)
    return float((int2 - int1) / (hi - lo))


def bd_quality(anchor: RDCurve, test: RDCurve) -> float:
    _check(anchor, "anchor")
    _check(test, "test")
    return _mean_gap(np.log10(anchor.bpp), anchor.quality, np.log10(test.bpp), test.quality)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    _check(anchor, "anchor")
    _check(test, "test")
    gap = _mean_gap(anchor.quality, np.log10(anchor.bpp), test.quality, np.log10(test.bpp))
    return (10.0**gap - 1.0) * 100.0


def bd_metrics(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    """``(BD-rate in %, BD-quality in dB)`` of ``test`` against ``anchor``."""
    return bd_rate(anchor, test), bd_quality(anchor, test)


# -- CSV interchange --------------------------------------------------------


def write_rd_csv(curves: list[RDCurve], path: str | Path) -> None:
    """One row per point: ``label,bpp,quality``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "bpp", "quality"])
        for curve in curves:
            for p in curve.points:
                w.writerow([curve.label, repr(p.bpp), repr(p.quality)])


def read_rd_csv(path: str | Path) -> dict[str, RDCurve]:
    groups: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "bpp", "quality"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected a label,bpp,quality header")
        for row in reader:
            groups.setdefault(row["label"], []).append(
                RDPoint(float(row["bpp"]), float(row["quality"]), row["label"])
            )
    return {label: RDCurve(points, label) for label, points in groups.items()}


def read_single_curve(path: str | Path) -> RDCurve:
    curves = read_rd_csv(path)
    if len(curves) != 1:
        raise ValueError(f"{path} holds {len(curves)} curves, expected one")
    return next(iter(curves.values()))


# -- published reference deltas ---------------------------------------------


@dataclass(frozen=True)
class ReferenceRow:
    method: str
    dataset: str
    bd_psnr: str
    bd_rate: str

    def formatted(self) -> str:
        return f"{self.bd_psnr} dB / {self.bd_rate}%"


def load_reference_bd(path: str | Path | None = None) -> list[ReferenceRow]:
    """Published BD results against BPG (anchor), one row per method and dataset.

    Values are kept as printed; empty cells (not reported) are skipped.
    """
    if path is None:
        text = resources.files("sigvic.data_files").joinpath("reference_bd_vs_bpg.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for rec in csv.DictReader(text.splitlines()):
        if not rec["bd_psnr_db"]:
            continue
        # reject malformed numbers early
        float(rec["bd_psnr_db"]), float(rec["bd_rate_pct"])
        rows.append(ReferenceRow(rec["method"], rec["dataset"], rec["bd_psnr_db"], rec["bd_rate_pct"]))
    return rows
