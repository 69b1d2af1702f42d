"""Model and lambda-range configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import ConfigurationError, DomainError

DEFAULT_RANGES = {"mse": (0.0016, 0.045), "msssim": (5.0, 120.0)}


@dataclass(frozen=True)
class LambdaSpec:
    """The admissible rate-distortion tradeoff range for one distortion metric."""

    lambda_min: float = 0.0016
    lambda_max: float = 0.045
    metric: str = "mse"

    def __post_init__(self):
        if self.metric not in DEFAULT_RANGES:
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if not (0 < self.lambda_min <= self.lambda_max) or not math.isfinite(self.lambda_max):
            raise ConfigurationError(f"invalid lambda range ({self.lambda_min}, {self.lambda_max})")

    @classmethod
    def for_metric(cls, metric: str) -> "LambdaSpec":
        lo, hi = DEFAULT_RANGES[metric]
        return cls(lo, hi, metric)

    def contains(self, lam: float) -> bool:
        return self.lambda_min <= lam <= self.lambda_max

    def check(self, lam: float) -> float:
        if not self.contains(lam):
            raise DomainError(
                f"lambda {lam} outside the model's range ({self.lambda_min:g}, {self.lambda_max:g})"
            )
        return lam


@dataclass
class CodecConfig:
    """Architecture hyperparameters.

    ``use_sgu`` and ``use_sffm`` exist for the ablation schemes; with
    ``use_sgu=False`` the SSN sees a constant importance of 0.5.
    """

    N: int = 192
    K: int = 32
    stages: int = 4
    lambda_range: LambdaSpec = field(default_factory=LambdaSpec)
    topk_indices: tuple[int, ...] | None = None
    use_sgu: bool = True
    use_sffm: bool = True
    sffm_width: int = 64
    reduction: int = 16
    ssn_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.lambda_range, dict):
            self.lambda_range = LambdaSpec(**self.lambda_range)
        if not self.N >= self.K >= 1:
            raise ConfigurationError(f"need N >= K >= 1, got N={self.N}, K={self.K}")
        if self.stages < 2:
            raise ConfigurationError("at least two stages are required")
        if self.topk_indices is not None:
            idx = tuple(int(i) for i in self.topk_indices)
            if len(idx) != self.K or any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0 or idx[-1] >= self.N:
                raise ConfigurationError(f"topk_indices must be {self.K} increasing indices below {self.N}")
            self.topk_indices = idx

    @property
    def factor(self) -> int:
        return 2**self.stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk_indices"] = list(self.topk_indices) if self.topk_indices is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        if d.get("topk_indices") is not None:
            d["topk_indices"] = tuple(d["topk_indices"])
        return cls(**d)
