"""Age-period count grids: loading, validation, aggregation and log rates."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DuplicateCell,
    IndivisibleSpan,
    LogOfZero,
    MissingCell,
    MissingInput,
    NegativeCount,
    NonpositiveExposure,
    RaggedBins,
    ValidationError,
)

DEFAULT_SCHEMA = {
    "age_group": "age_group",
    "period": "period",
    "deaths": "deaths",
    "population": "population",
}

_LABEL_RE = re.compile("^\\s*(\\d+)\\s*(?:[-\u2013\u2014]\\s*(\\d+))?\\s*$")


@dataclass(frozen=True)
class AgeGroup:
    label: str
    lower: int
    upper: int

    @property
    def width(self) -> int:
        return self.upper - self.lower + 1

    @property
    def midpoint(self) -> float:
        # 10-14 covers [10, 15) so its midpoint is 12.5
        return (self.lower + self.upper + 1) / 2.0

    @classmethod
    def parse(cls, label) -> "AgeGroup":
        m = _LABEL_RE.match(str(label))
        if m is None:
            raise ValidationError(f"cannot parse age group label {label!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if hi < lo:
            raise ValidationError(f"age group {label!r} has upper < lower")
        return cls(label=_canonical_label(lo, hi), lower=lo, upper=hi)


def _canonical_label(lo: int, hi: int) -> str:
    return str(lo) if lo == hi else f"{lo}-{hi}"


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ApcDataset:
    """Rectangular grid of counts and exposures, ages by periods.

    ``counts`` and ``exposures`` are ``I x J`` arrays indexed ``[age, period]``.
    Instances are immutable; arrays are flagged read-only.
    """

    age_groups: tuple
    periods: np.ndarray
    counts: np.ndarray
    exposures: np.ndarray
    ratio: int = field(init=False)
    period_step: int = field(init=False)

    def __post_init__(self):
        groups = tuple(g if isinstance(g, AgeGroup) else AgeGroup.parse(g) for g in self.age_groups)
        object.__setattr__(self, "age_groups", groups)
        periods = _frozen(self.periods, np.int64)
        counts = np.asarray(self.counts, dtype=float)
        exposures = _frozen(self.exposures, float)
        I, J = len(groups), len(periods)

        if I == 0 or J == 0:
            raise ValidationError("dataset needs at least one age group and one period")
        if counts.shape != (I, J) or exposures.shape != (I, J):
            raise ValidationError(
                f"counts {counts.shape} and exposures {exposures.shape} must both be ({I}, {J})"
            )
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise NegativeCount("counts must be finite and non-negative")
        if np.any(counts != np.round(counts)):
            raise ValidationError("counts must be integers")
        if not np.all(np.isfinite(exposures)) or np.any(exposures <= 0):
            raise NonpositiveExposure("exposures must be strictly positive")

        mids = np.array([g.midpoint for g in groups])
        if np.any(np.diff(mids) <= 0):
            raise ValidationError("age groups must be strictly increasing")
        widths = {g.width for g in groups}
        if len(widths) != 1:
            raise RaggedBins(f"age groups have unequal widths {sorted(widths)}")
        steps = np.diff(periods)
        if np.any(steps <= 0):
            raise ValidationError("periods must be strictly increasing")
        if len(set(steps.tolist())) > 1:
            raise ValidationError("periods must have a constant step")
        step = int(steps[0]) if len(steps) else 1
        (width,) = widths
        if width % step:
            raise RaggedBins(f"age width {width} is not a multiple of the period step {step}")

        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "counts", _frozen(counts.astype(np.int64), np.int64))
        object.__setattr__(self, "exposures", exposures)
        object.__setattr__(self, "ratio", width // step)
        object.__setattr__(self, "period_step", step)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def n_ages(self) -> int:
        return len(self.age_groups)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def age_width(self) -> int:
        return self.age_groups[0].width

    @property
    def midpoints(self) -> np.ndarray:
        return np.array([g.midpoint for g in self.age_groups])

    @property
    def labels(self) -> list:
        return [g.label for g in self.age_groups]

    def select_periods(self, first=None, last=None) -> "ApcDataset":
        """Sub-grid restricted to periods in ``[first, last]`` (inclusive)."""
        keep = np.ones(self.n_periods, dtype=bool)
        if first is not None:
            keep &= self.periods >= first
        if last is not None:
            keep &= self.periods <= last
        if not keep.any():
            raise ValidationError(f"no periods within [{first}, {last}]")
        return ApcDataset(
            self.age_groups, self.periods[keep], self.counts[:, keep], self.exposures[:, keep]
        )

    def to_frame(self) -> pd.DataFrame:
        I, J = self.shape
        return pd.DataFrame(
            {
                "age_group": np.repeat(self.labels, J),
                "period": np.tile(self.periods, I),
                "deaths": self.counts.ravel(),
                "population": self.exposures.ravel(),
            }
        )

    def __eq__(self, other):
        if not isinstance(other, ApcDataset):
            return NotImplemented
        return (
            self.age_groups == other.age_groups
            and np.array_equal(self.periods, other.periods)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.exposures, other.exposures)
        )

    __hash__ = None


@dataclass(frozen=True)
class LogRateSurface:
    values: np.ndarray
    correction: float


def from_frame(df: pd.DataFrame, schema: dict | None = None) -> ApcDataset:
    """Build a dataset from a long table with one row per (age group, period)."""
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    missing = [c for c in cols.values() if c not in df.columns]
    if missing:
        raise ValidationError(f"missing columns: {', '.join(missing)}")

    groups = [AgeGroup.parse(v) for v in df[cols["age_group"]]]
    try:
        periods = df[cols["period"]].astype(np.int64).to_numpy()
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"non-integer period values: {exc}") from None
    deaths = pd.to_numeric(df[cols["deaths"]], errors="coerce").to_numpy(dtype=float)
    pop = pd.to_numeric(df[cols["population"]], errors="coerce").to_numpy(dtype=float)
    if np.any(np.isnan(deaths)) or np.any(np.isnan(pop)):
        raise ValidationError("deaths and population must be numeric")

    uniq_groups = sorted(set(groups), key=lambda g: (g.lower, g.upper))
    uniq_periods = np.unique(periods)
    gpos = {g: i for i, g in enumerate(uniq_groups)}
    ppos = {int(p): j for j, p in enumerate(uniq_periods)}
    I, J = len(uniq_groups), len(uniq_periods)

    counts = np.full((I, J), np.nan)
    exposures = np.full((I, J), np.nan)
    for g, p, y, n in zip(groups, periods, deaths, pop):
        i, j = gpos[g], ppos[int(p)]
        if not np.isnan(counts[i, j]):
            raise DuplicateCell(f"cell (age {g.label}, period {p}) appears more than once")
        counts[i, j] = y
        exposures[i, j] = n
    if np.isnan(counts).any():
        i, j = np.argwhere(np.isnan(counts))[0]
        raise MissingCell(f"missing cell (age {uniq_groups[i].label}, period {uniq_periods[j]})")
    if np.any(counts < 0):
        raise NegativeCount("counts must be non-negative")
    if np.any(exposures <= 0):
        raise NonpositiveExposure("exposures must be strictly positive")
    return ApcDataset(tuple(uniq_groups), uniq_periods, counts, exposures)


def load_csv(path, schema: dict | None = None) -> ApcDataset:
    """Read a long-format CSV (age_group, period, deaths, population)."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    age_col = {**DEFAULT_SCHEMA, **(schema or {})}["age_group"]
    df = pd.read_csv(path, encoding="utf-8", dtype={age_col: str}, float_precision="round_trip")
    return from_frame(df, schema)


def write_csv(data: ApcDataset, path) -> None:
    data.to_frame().to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


def aggregate_ages(single_year: ApcDataset, width: int) -> ApcDataset:
    """Sum single-year age rows into blocks of ``width`` years."""
    if width < 1:
        raise ValidationError("width must be a positive integer")
    if single_year.age_width != 1:
        raise ValidationError("aggregate_ages expects single-year age groups")
    lowers = np.array([g.lower for g in single_year.age_groups])
    if np.any(np.diff(lowers) != 1):
        raise ValidationError("single-year ages must be contiguous")
    if single_year.n_ages % width:
        raise IndivisibleSpan(f"age span of {single_year.n_ages} years is not divisible by {width}")
    if width == 1:
        return single_year

    I, J = single_year.shape
    counts = single_year.counts.reshape(I // width, width, J).sum(axis=1)
    exposures = single_year.exposures.reshape(I // width, width, J).sum(axis=1)
    groups = tuple(
        AgeGroup(_canonical_label(lo, lo + width - 1), int(lo), int(lo + width - 1))
        for lo in lowers[::width]
    )
    return ApcDataset(groups, single_year.periods, counts, exposures)


def log_rates(data: ApcDataset, correction: float = 0.5) -> LogRateSurface:
    """Elementwise ``log((count + correction) / exposure)``."""
    if correction < 0:
        raise ValidationError("correction must be non-negative")
    if correction == 0 and np.any(data.counts == 0):
        raise LogOfZero("zero count with no continuity correction")
    values = np.log((data.counts + correction) / data.exposures)
    values.flags.writeable = False
    return LogRateSurface(values=values, correction=float(correction))
