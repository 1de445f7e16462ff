"""Univariate penalised spline bases: cubic regression (CRS), B-spline (BS)
and thin plate regression spline (TPRS).

Every basis carries a penalty matrix ``S`` with ``gamma' S gamma`` measuring
wiggliness, and a two-dimensional null space (constants and straight lines).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import DuplicateValues, TooFewKnots, ValidationError

FAMILIES = ("crs", "bs", "tprs")
EIGEN_TOL = 1e-10


@dataclass(frozen=True)
class BasisEvaluation:
    matrix: np.ndarray
    extrapolated: np.ndarray
    mode: str


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Evaluated basis ``X`` at the training ``values`` plus its penalty ``S``."""

    family: str
    values: np.ndarray
    knots: np.ndarray
    X: np.ndarray = field(init=False, repr=False)
    S: np.ndarray = field(init=False, repr=False)
    null_dim: int = 2
    extrapolation = "linear"

    def __post_init__(self):
        object.__setattr__(self, "S", self._penalty())
        object.__setattr__(self, "X", self._design(self.values))

    @property
    def n_basis(self) -> int:
        return self.S.shape[0]

    @property
    def lo(self) -> float:
        return float(self.values[0])

    @property
    def hi(self) -> float:
        return float(self.values[-1])

    def evaluate(self, new_values) -> BasisEvaluation:
        x = np.atleast_1d(np.asarray(new_values, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValidationError("basis can only be evaluated at finite values")
        outside = (x < self.lo) | (x > self.hi)
        return BasisEvaluation(self._design(x), outside, self.extrapolation)

    def _design(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _penalty(self):  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class CubicRegressionBasis(SplineBasis):
    """Natural cubic spline parameterised by its values at the knots.

    Beyond the end knots the curve continues as a straight line, so the
    second derivative there is zero.
    """

    def _pieces(self):
        k = self.knots
        h = np.diff(k)
        m = len(k)
        D = np.zeros((m - 2, m))
        B = np.zeros((m - 2, m - 2))
        for i in range(m - 2):
            D[i, i] = 1.0 / h[i]
            D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            D[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i + 1 < m - 2:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        return h, D, B

    def _penalty(self):
        _, D, B = self._pieces()
        S = D.T @ linalg.solve(B, D, assume_a="pos")
        return (S + S.T) / 2.0

    def _design(self, x):
        k = self.knots
        m = len(k)
        h, D, B = self._pieces()
        # F maps knot values to second derivatives at the knots (zero at the ends)
        F = np.zeros((m, m))
        F[1:-1] = linalg.solve(B, D, assume_a="pos")
        eye = np.eye(m)
        X = np.empty((len(x), m))

        j = np.clip(np.searchsorted(k, x, side="right") - 1, 0, m - 2)
        for r, (xr, jr) in enumerate(zip(x, j)):
            if xr < k[0]:
                h0 = h[0]
                slope = (eye[1] - eye[0]) / h0 - h0 / 6.0 * F[1]
                X[r] = eye[0] + (xr - k[0]) * slope
            elif xr > k[-1]:
                hl = h[-1]
                slope = (eye[-1] - eye[-2]) / hl + hl / 6.0 * F[-2]
                X[r] = eye[-1] + (xr - k[-1]) * slope
            else:
                hj = h[jr]
                dm = k[jr + 1] - xr
                dp = xr - k[jr]
                cm = (dm**3 / hj - hj * dm) / 6.0
                cp = (dp**3 / hj - hj * dp) / 6.0
                X[r] = (dm / hj) * eye[jr] + (dp / hj) * eye[jr + 1] + cm * F[jr] + cp * F[jr + 1]
        return X


@dataclass(frozen=True, eq=False)
class BSplineBasis(SplineBasis):
    """Cubic B-splines on equally spaced knots with a second-order difference
    penalty on the coefficients (a P-spline stand-in for the integrated
    squared second derivative).

    Outside the data range each curve continues along its tangent at the
    boundary, as mgcv does for ``bs = "bs"``; extending the cubic edge pieces
    instead makes forecast variance grow with the cube of the horizon.
    """

    def _penalty(self):
        return difference_penalty(len(self.knots) - 4, order=2).astype(float)

    def _design(self, x):
        lo, hi = self.lo, self.hi
        inside = np.clip(x, lo, hi)
        X = BSpline.design_matrix(inside, self.knots, 3, extrapolate=True).toarray()
        n = len(self.knots) - 4
        if np.any(x < lo) or np.any(x > hi):
            deriv = BSpline(self.knots, np.eye(n), 3).derivative()
            d_lo, d_hi = deriv(lo), deriv(hi)
            X += np.outer(np.minimum(x - lo, 0.0), d_lo) + np.outer(np.maximum(x - hi, 0.0), d_hi)
        return X


@dataclass(frozen=True, eq=False)
class ThinPlateBasis(SplineBasis):
    """One-dimensional thin plate regression spline.

    The full thin plate spline through ``n`` points has kernel matrix
    ``E_ij = |x_i - x_j|^3 / 12``. The kernel is restricted to coefficient
    vectors orthogonal to {1, x}, eigen-decomposed, and truncated to the
    ``k - 2`` leading eigenvectors; the last two columns are 1 and x.
    """

    rank: int = 0
    _proj: np.ndarray = field(default=None, repr=False)
    _eigvals: np.ndarray = field(default=None, repr=False)
    _center: float = 0.0

    def __post_init__(self):
        x = self.values
        n, k = len(x), self.rank
        center = float(x.mean())
        T = np.column_stack([np.ones(n), x - center])
        # orthonormal basis of {delta : T' delta = 0}
        Q, _ = linalg.qr(T, mode="full")
        P = Q[:, 2:]
        E = _tps_kernel(x, x)
        Ec = P.T @ E @ P
        w, V = linalg.eigh((Ec + Ec.T) / 2.0)
        order = np.argsort(w)[::-1][: k - 2]
        w, V = w[order], V[:, order]
        if k > 2 and w[-1] <= EIGEN_TOL * w[0]:
            raise ValidationError(f"thin plate kernel has fewer than {k - 2} usable eigenvalues")
        object.__setattr__(self, "_center", center)
        object.__setattr__(self, "_proj", P @ V)
        object.__setattr__(self, "_eigvals", w)
        super().__post_init__()

    def _penalty(self):
        k = self.rank
        S = np.zeros((k, k))
        S[: k - 2, : k - 2] = np.diag(self._eigvals)
        return S

    def _design(self, x):
        wiggly = _tps_kernel(x, self.values) @ self._proj
        return np.column_stack([wiggly, np.ones(len(x)), x - self._center])


def _tps_kernel(a, b):
    r = np.abs(np.subtract.outer(np.asarray(a, float), np.asarray(b, float)))
    return r**3 / 12.0


def difference_penalty(m: int, order: int = 2) -> np.ndarray:
    """``D' D`` for the ``order``-th difference operator on ``m`` coefficients."""
    if m <= order:
        raise TooFewKnots(f"need more than {order} coefficients for an order-{order} penalty")
    D = np.diff(np.eye(m, dtype=np.int64), n=order, axis=0)
    return D.T @ D


def make_basis(family: str, values, n_knots: int) -> SplineBasis:
    """Build a penalised basis of dimension ``n_knots`` over sorted ``values``."""
    family = family.lower()
    if family not in FAMILIES:
        raise ValidationError(f"unknown basis family {family!r}; choose from {FAMILIES}")
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValidationError("values must be a finite 1-d sequence")
    if np.any(np.diff(x) < 0):
        raise ValidationError("values must be sorted")
    if np.any(np.diff(x) == 0):
        raise DuplicateValues("values must be distinct")
    n_knots = int(n_knots)
    min_knots = 3 if family == "tprs" else 4
    if n_knots < min_knots:
        raise TooFewKnots(f"{family} needs at least {min_knots} knots, got {n_knots}")
    if len(x) < n_knots:
        raise TooFewKnots(f"{n_knots} knots need at least {n_knots} distinct values, got {len(x)}")
    x.flags.writeable = False

    if family == "crs":
        knots = np.quantile(x, np.linspace(0.0, 1.0, n_knots))
        return CubicRegressionBasis("crs", x, knots)
    if family == "bs":
        n_int = n_knots - 3
        dx = (x[-1] - x[0]) / n_int
        knots = x[0] + dx * np.arange(-3, n_int + 4)
        return BSplineBasis("bs", x, knots)
    return ThinPlateBasis("tprs", x, x.copy(), rank=n_knots)


def evaluate(basis: SplineBasis, new_values) -> BasisEvaluation:
    return basis.evaluate(new_values)
