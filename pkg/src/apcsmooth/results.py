"""FitResult: point estimates and 95% bounds on the full grid, CSV round trip."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import MissingInput, ValidationError

FIT_COLUMNS = ["age", "period", "eta_hat", "lower", "upper", "window"]
WINDOWS = ("estimation", "prediction")


@dataclass
class FitResult:
    """Linear-predictor estimates for every (age, period) cell, row-major."""

    engine: str
    age: np.ndarray
    period: np.ndarray
    eta_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    window: np.ndarray
    hyper: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.age = np.asarray(self.age).astype(str)
        self.period = np.asarray(self.period, dtype=np.int64)
        for name in ("eta_hat", "lower", "upper"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.window = np.asarray(self.window).astype(str)
        n = len(self.age)
        if any(len(v) != n for v in (self.period, self.eta_hat, self.lower, self.upper, self.window)):
            raise ValidationError("all FitResult columns must have the same length")
        bad = set(np.unique(self.window)) - set(WINDOWS)
        if bad:
            raise ValidationError(f"unknown window labels {sorted(bad)}")

    def __len__(self):
        return len(self.age)

    def mask(self, window: str) -> np.ndarray:
        return self.window == window

    def subset(self, mask) -> "FitResult":
        return FitResult(
            self.engine, self.age[mask], self.period[mask], self.eta_hat[mask],
            self.lower[mask], self.upper[mask], self.window[mask], self.hyper, self.diagnostics,
        )

    def key(self) -> list:
        return list(zip(self.age.tolist(), self.period.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "age": self.age,
                "period": self.period,
                "eta_hat": self.eta_hat,
                "lower": self.lower,
                "upper": self.upper,
                "window": self.window,
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", encoding="utf-8")

    @classmethod
    def from_frame(cls, df: pd.DataFrame, engine: str = "unknown") -> "FitResult":
        missing = [c for c in FIT_COLUMNS if c not in df.columns]
        if missing:
            raise ValidationError(f"fit table is missing columns {missing}")
        return cls(
            engine,
            df["age"].astype(str).to_numpy(),
            df["period"].to_numpy(),
            df["eta_hat"].to_numpy(),
            df["lower"].to_numpy(),
            df["upper"].to_numpy(),
            df["window"].to_numpy(),
        )

    @classmethod
    def from_csv(cls, path, engine: str | None = None) -> "FitResult":
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"no such fit file: {path}")
        df = pd.read_csv(path, dtype={"age": str}, float_precision="round_trip")
        return cls.from_frame(df, engine or path.stem)
