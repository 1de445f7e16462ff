"""Random-walk structure matrices, intrinsic GMRF densities and PC priors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse

from .errors import NonpositivePrecision, TooSmall, ValidationError


@dataclass(frozen=True)
class StructureMatrix:
    order: int
    m: int
    R: sparse.csr_matrix

    @property
    def rank(self) -> int:
        return self.m - self.order

    def toarray(self) -> np.ndarray:
        return self.R.toarray()


def structure_matrix(order: int, m: int) -> StructureMatrix:
    """Banded integer structure matrix of a first or second order random walk.

    Written out from its stencil rather than as ``D'D`` so that the two can be
    checked against each other.
    """
    if order not in (1, 2):
        raise ValidationError("only RW1 and RW2 are supported")
    if m < order + 1:
        raise TooSmall(f"RW{order} needs at least {order + 1} nodes, got {m}")

    if order == 1:
        main = np.full(m, 2, dtype=np.int64)
        main[0] = main[-1] = 1
        off1 = np.full(m - 1, -1, dtype=np.int64)
        R = sparse.diags([off1, main, off1], [-1, 0, 1], format="csr", dtype=np.int64)
        return StructureMatrix(1, m, R)

    main = np.full(m, 6, dtype=np.int64)
    main[1] = main[-2] = 5
    main[0] = main[-1] = 1
    if m == 3:
        main[1] = 4
    off1 = np.full(m - 1, -4, dtype=np.int64)
    off1[0] = off1[-1] = -2
    off2 = np.ones(m - 2, dtype=np.int64)
    R = sparse.diags([off2, off1, main, off1, off2], [-2, -1, 0, 1, 2], format="csr", dtype=np.int64)
    return StructureMatrix(2, m, R)


def linear_constraints(m: int, t=None) -> np.ndarray:
    """Rows ``1'`` and ``t'`` (default ``t = 1..m``): sum-to-zero and no linear trend."""
    t = np.arange(1, m + 1, dtype=float) if t is None else np.asarray(t, dtype=float)
    return np.vstack([np.ones(m), t])


def rw2_logdensity(f, tau: float) -> float:
    """Log density of an RW2 field up to an additive constant.

    ``(m - 2)/2 * log(tau) - tau/2 * sum((second differences of f)^2)``.
    """
    f = np.asarray(f, dtype=float)
    if tau <= 0:
        raise NonpositivePrecision("precision must be positive")
    if f.ndim != 1 or len(f) < 3:
        raise TooSmall("RW2 needs at least 3 values")
    d2 = np.diff(f, n=2)
    return 0.5 * (len(f) - 2) * math.log(tau) - 0.5 * tau * float(d2 @ d2)


def intrinsic_logdensity(f, tau: float, R, rank: int) -> float:
    """``rank/2 * log(tau) - tau/2 * f'Rf`` for a general structure matrix."""
    if tau <= 0:
        raise NonpositivePrecision("precision must be positive")
    f = np.asarray(f, dtype=float)
    return 0.5 * rank * math.log(tau) - 0.5 * tau * float(f @ (R @ f))


@dataclass(frozen=True)
class PCPrior:
    """Penalised-complexity prior on a precision, set by ``P(sigma > U) = alpha``.

    Equivalent to ``sigma = tau^(-1/2) ~ Exponential(kappa)`` with
    ``kappa = -log(alpha) / U``.
    """

    U: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        if not self.U > 0:
            raise ValidationError("U must be positive")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")

    @property
    def kappa(self) -> float:
        return -math.log(self.alpha) / self.U

    def sample_sigma(self, rng, size=None):
        return rng.exponential(1.0 / self.kappa, size=size)


def pc_log_prior(tau, prior: PCPrior):
    """``log[(kappa/2) tau^(-3/2) exp(-kappa tau^(-1/2))]``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise NonpositivePrecision("precision must be positive")
    k = prior.kappa
    out = math.log(k / 2.0) - 1.5 * np.log(tau) - k / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


def pc_log_prior_logtau(theta, prior: PCPrior):
    """Log density of ``theta = log(tau)`` (includes the Jacobian ``tau``)."""
    theta = np.asarray(theta, dtype=float)
    k = prior.kappa
    out = math.log(k / 2.0) - 0.5 * theta - k * np.exp(-0.5 * theta)
    return float(out) if out.ndim == 0 else out


def condition_on_constraints(x, Q, C, e=None, factor=None):
    """Conditioning by kriging: correct ``x ~ N(., Q^-1)`` so that ``C x = e``.

    Returns ``x - Q^-1 C' (C Q^-1 C')^-1 (C x - e)``. ``factor`` may hold a
    Cholesky factor of ``Q`` from :func:`scipy.linalg.cho_factor`.
    """
    x = np.asarray(x, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    e = np.zeros(C.shape[0]) if e is None else np.asarray(e, dtype=float)
    if factor is None:
        factor = linalg.cho_factor(_dense(Q))
    QiCt = linalg.cho_solve(factor, C.T)
    resid = C @ x - (e if x.ndim == 1 else e[:, None])
    return x - QiCt @ linalg.solve(C @ QiCt, resid, assume_a="pos")


def constrained_covariance(Q, C, factor=None) -> np.ndarray:
    """Covariance of ``N(., Q^-1)`` conditioned on ``C x = e``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if factor is None:
        factor = linalg.cho_factor(_dense(Q))
    n = C.shape[1]
    Sigma = linalg.cho_solve(factor, np.eye(n))
    QiCt = Sigma @ C.T
    Sigma -= QiCt @ linalg.solve(C @ QiCt, QiCt.T, assume_a="pos")
    return (Sigma + Sigma.T) / 2.0


def sample_constrained(Q, C, rng, size: int = 1) -> np.ndarray:
    """Draw zero-mean samples from ``N(0, Q^-1)`` conditioned on ``C x = 0``.

    ``Q`` must be proper; for an intrinsic field pass ``tau R + C'C``.
    Returns an array of shape ``(size, n)``.
    """
    Q = _dense(Q)
    L = linalg.cholesky(Q, lower=True)
    z = rng.standard_normal((Q.shape[0], size))
    x = linalg.solve_triangular(L.T, z, lower=False)
    return condition_on_constraints(x, Q, C, factor=(L, True)).T


def _dense(Q):
    return Q.toarray() if sparse.issparse(Q) else np.asarray(Q, dtype=float)
