"""Point and interval scores on the log-rate scale, split by window."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import GridMismatch, InvertedInterval, ShapeMismatch, ValidationError
from .results import WINDOWS, FitResult


@dataclass(frozen=True)
class ScoreReport:
    window: str
    mae: float
    mse: float
    interval_score: float
    mean_width: float
    coverage: float
    n_cells: int

    def as_dict(self) -> dict:
        return asdict(self)

    def scaled(self, factor: float = 100.0) -> dict:
        """Scores multiplied by ``factor`` (coverage as a percentage)."""
        out = self.as_dict()
        for k in ("mae", "mse", "interval_score", "mean_width", "coverage"):
            out[k] = out[k] * factor
        return out


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def _bounds(eta_true, lower, upper):
    eta_true, lower = _pair(eta_true, lower)
    _, upper = _pair(eta_true, upper)
    if np.any(lower > upper):
        raise InvertedInterval("lower bound exceeds upper bound")
    return eta_true, lower, upper


def mae_mse(eta_hat, eta_true) -> tuple:
    eta_hat, eta_true = _pair(eta_hat, eta_true)
    d = eta_hat - eta_true
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


def interval_score(eta_true, lower, upper, alpha: float = 0.05, per_cell: bool = False):
    """Interval score ``(u - l) + 2/alpha (l - y)[y < l] + 2/alpha (y - u)[y > u]``.

    Returns the mean over cells, or ``(per_cell, mean)`` with ``per_cell=True``.
    """
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    y, l, u = _bounds(eta_true, lower, upper)
    below = np.where(y < l, l - y, 0.0)
    above = np.where(y > u, y - u, 0.0)
    cell = (u - l) + (2.0 / alpha) * below + (2.0 / alpha) * above
    mean = float(np.mean(cell))
    return (cell, mean) if per_cell else mean


def coverage_width(eta_true, lower, upper) -> tuple:
    y, l, u = _bounds(eta_true, lower, upper)
    return float(np.mean((l <= y) & (y <= u))), float(np.mean(u - l))


def score_cells(window: str, eta_hat, eta_true, lower, upper, alpha: float = 0.05) -> ScoreReport:
    mae, mse = mae_mse(eta_hat, eta_true)
    cov, width = coverage_width(eta_true, lower, upper)
    return ScoreReport(window, mae, mse, interval_score(eta_true, lower, upper, alpha), width, cov, int(np.size(eta_true)))


def align_truth(fit: FitResult, truth: FitResult | dict) -> np.ndarray:
    """Truth values in the row order of ``fit``; ``truth`` maps (age, period) to eta."""
    lookup = truth if isinstance(truth, dict) else dict(zip(truth.key(), truth.eta_hat.tolist()))
    try:
        return np.array([lookup[k] for k in fit.key()])
    except KeyError as exc:
        raise GridMismatch(f"truth has no value for cell {exc.args[0]}") from None


def score_fit(fit: FitResult, eta_true, split_year: int | None = None, alpha: float = 0.05, scale: str = "log") -> dict:
    """ScoreReports per window.

    ``eta_true`` is aligned with the rows of ``fit``. With ``split_year`` the
    windows are recomputed as ``period < split_year`` (estimation) and the
    rest (prediction); otherwise the fit's own window column is used.
    ``scale="rate"`` exponentiates everything first.
    """
    eta_true = np.asarray(eta_true, dtype=float)
    if eta_true.shape != fit.eta_hat.shape:
        raise ShapeMismatch(f"truth has {eta_true.size} values for {len(fit)} fitted cells")
    if scale not in ("log", "rate"):
        raise ValidationError("scale must be 'log' or 'rate'")
    window = fit.window if split_year is None else np.where(fit.period < split_year, WINDOWS[0], WINDOWS[1])
    tr = np.exp if scale == "rate" else (lambda v: v)
    out = {}
    for w in WINDOWS:
        m = window == w
        if not m.any():
            continue
        out[w] = score_cells(w, tr(fit.eta_hat[m]), tr(eta_true[m]), tr(fit.lower[m]), tr(fit.upper[m]), alpha)
    return out
