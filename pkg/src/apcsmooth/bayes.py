"""Latent Gaussian APC model with RW2 curvature fields and PC priors.

The latent vector is ``x = [beta (3), f_age (I), f_period (J'), f_cohort (K')]``
where ``J'`` and ``K'`` include any forecast extension. Each field carries an
intrinsic RW2 prior ``tau_b R_b`` and the linear constraints ``[1'; t'] f = 0``,
imposed by conditioning by kriging. Hyperparameters ``theta = log tau`` are
handled empirically: the Laplace approximation to ``p(theta | y)`` is
maximised, then integrated over a small axis-aligned grid around the mode.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import linalg, optimize, special

from .dataset import ApcDataset
from .design import BLOCKS, ApcDesign, build_design
from .errors import Diverged, OptimFailed, ShapeMismatch, SingularSystem, ValidationError
from .gmrf import PCPrior, linear_constraints, pc_log_prior_logtau, structure_matrix
from .results import FitResult

log = logging.getLogger(__name__)

GRID_OFFSETS = (-0.75, -0.375, 0.0, 0.375, 0.75)
GRAD_TOL = 1e-8
MAX_NEWTON = 100
QUANTILE_TOL = 1e-8
THETA_BOUNDS = (-10.0, 25.0)


@dataclass(frozen=True, eq=False)
class LatentModel:
    """Latent structure of the RW2 APC model on a (possibly extended) grid."""

    design: ApcDesign
    horizon: int = 0
    prior: PCPrior = field(default_factory=PCPrior)
    fixed_sd: float = 1000.0
    observed: np.ndarray | None = None

    def __post_init__(self):
        if self.design.mode != "gmrf":
            raise ValidationError("LatentModel needs a design built in gmrf mode")
        if self.horizon < 0:
            raise ValidationError("horizon must be non-negative")
        a, p = self.design.cells(self.J_ext)
        if self.observed is None:
            object.__setattr__(self, "observed", p <= self.design.J)
        elif len(self.observed) != len(a):
            raise ShapeMismatch(f"observed mask has {len(self.observed)} entries for {len(a)} cells")
        object.__setattr__(self, "_cells", (a, p))

    # ----- dimensions -----------------------------------------------------
    @property
    def I(self) -> int:
        return self.design.I

    @property
    def J_ext(self) -> int:
        return self.design.J + self.horizon

    @property
    def K_ext(self) -> int:
        return self.design.R * (self.I - 1) + self.J_ext

    @property
    def field_sizes(self) -> tuple:
        return (self.I, self.J_ext, self.K_ext)

    @property
    def dim(self) -> int:
        return 3 + sum(self.field_sizes)

    def field_slices(self) -> dict:
        out, start = {}, 3
        for name, m in zip(BLOCKS, self.field_sizes):
            out[name] = slice(start, start + m)
            start += m
        return out

    @property
    def cells(self):
        return self._cells

    # ----- matrices -------------------------------------------------------
    @property
    def A(self) -> np.ndarray:
        """Maps the latent vector to ``eta`` (log rate) on every cell."""
        a, p = self.cells
        A = np.zeros((len(a), self.dim))
        A[:, :3] = self.design.fixed_rows(a, p)
        rows = np.arange(len(a))
        sl = self.field_slices()
        for name in BLOCKS:
            A[rows, sl[name].start + self.design.level_index(name, a, p)] = 1.0
        return A

    @cached_property
    def _structures(self) -> tuple:
        return tuple(structure_matrix(2, m).toarray().astype(float) for m in self.field_sizes)

    def structures(self) -> list:
        return list(self._structures)

    @property
    def C(self) -> np.ndarray:
        """Stacked ``[1'; t']`` rows for each field (6 x dim)."""
        C = np.zeros((6, self.dim))
        for k, (name, sl) in enumerate(self.field_slices().items()):
            C[2 * k : 2 * k + 2, sl] = linear_constraints(sl.stop - sl.start)
        return C

    def Q_prior(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        if tau.shape != (3,) or np.any(tau <= 0):
            raise ValidationError("tau must hold three positive precisions")
        Q = np.zeros((self.dim, self.dim))
        Q[:3, :3] = np.eye(3) / self.fixed_sd**2
        for t, R, sl in zip(tau, self.structures(), self.field_slices().values()):
            Q[sl, sl] = t * R
        return Q

    def null_basis(self) -> np.ndarray:
        """Orthonormal basis of ``{x : C x = 0}``, block diagonal by field.

        Keeping the weakly identified fixed effects on their own axes stops
        them mixing with the field directions in log-determinants.
        """
        blocks = [np.eye(3)] + [linalg.null_space(linear_constraints(m)) for m in self.field_sizes]
        return linalg.block_diag(*blocks)

    def masked(self, observed) -> "LatentModel":
        return replace(self, observed=np.asarray(observed, dtype=bool))


def build_latent_model(data: ApcDataset, horizon: int = 0, prior: PCPrior | None = None, fixed_sd: float = 1000.0):
    design = build_design(data, "gmrf")
    return LatentModel(design, horizon, prior or PCPrior(), fixed_sd)


def forecast_extend(model: LatentModel, horizon: int) -> LatentModel:
    """Add ``horizon`` future periods; new cells carry the prior only."""
    if horizon < 0:
        raise ValidationError("horizon must be non-negative")
    if horizon == 0:
        return model
    n_old = model.J_ext
    old = model.observed.reshape(model.I, n_old)
    obs = np.hstack([old, np.zeros((model.I, horizon), dtype=bool)]).ravel()
    return replace(model, horizon=model.horizon + horizon, observed=obs)


@dataclass(frozen=True)
class Observations:
    """Responses for the observed cells, in the model's row-major cell order."""

    y: np.ndarray
    offset: np.ndarray
    family: str = "poisson"
    noise_precision: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, data: ApcDataset) -> "Observations":
        return cls(data.counts.ravel().astype(float), np.log(data.exposures.ravel()))


@dataclass
class GaussianApprox:
    """Gaussian approximation ``N(mode, precision^-1)`` restricted to ``C x = 0``."""

    mode: np.ndarray
    precision: np.ndarray
    loglik: float
    gradient_norm: float
    n_iter: int
    converged: bool

    def __iter__(self):
        yield self.mode
        yield self.precision


def _loglik(family, y, eta, prec):
    if family == "poisson":
        return float(np.sum(y * eta - np.exp(eta) - special.gammaln(y + 1.0)))
    r = y - eta
    return float(-0.5 * np.sum(prec * r * r) + 0.5 * np.sum(np.log(prec / (2 * np.pi))))


def _score_weights(family, y, eta, prec):
    if family == "poisson":
        mu = np.exp(eta)
        return y - mu, mu
    return prec * (y - eta), prec


def _observations(model, obs):
    n_obs = int(model.observed.sum())
    if len(obs.y) != n_obs or len(obs.offset) != n_obs:
        raise ShapeMismatch(f"model observes {n_obs} cells, got {len(obs.y)} responses")
    if obs.family not in ("poisson", "gaussian"):
        raise ValidationError(f"unknown family {obs.family!r}")
    prec = np.ones(n_obs) if obs.noise_precision is None else np.broadcast_to(obs.noise_precision, (n_obs,))
    return obs.y, obs.offset, prec


def gaussian_approx(model: LatentModel, obs: Observations, tau, x0=None, mats=None) -> GaussianApprox:
    """Mode and precision of the Gaussian approximation to ``p(x | y, tau)``.

    Newton steps use ``Q~ = Q_prior + C'C`` (equal to ``Q_prior`` on the
    constrained subspace) and each step is corrected onto ``C x = 0``.
    """
    y, off, prec = _observations(model, obs)
    A, C = mats if mats is not None else (model.A, model.C)
    Ao = A[model.observed]
    Q = model.Q_prior(tau)
    Qs = Q + C.T @ C
    P = np.eye(model.dim) - C.T @ linalg.solve(C @ C.T, C)
    fam = obs.family

    def logpost(x):
        return _loglik(fam, y, Ao @ x + off, prec) - 0.5 * float(x @ Q @ x)

    def newton(x):
        eta = Ao @ x + off
        s, w = _score_weights(fam, y, eta, prec)
        H = Qs + Ao.T @ (w[:, None] * Ao)
        try:
            cf = linalg.cho_factor(H)
        except linalg.LinAlgError:
            raise SingularSystem("latent precision is not positive definite", {"tau": list(map(float, tau))}) from None
        rhs = Ao.T @ (w * (Ao @ x) + s)
        m = linalg.cho_solve(cf, rhs)
        HiCt = linalg.cho_solve(cf, C.T)
        return m - HiCt @ linalg.solve(C @ HiCt, C @ m), H

    def proj_grad(x):
        s, _ = _score_weights(fam, y, Ao @ x + off, prec)
        return P @ (Ao.T @ s - Q @ x)

    x = np.zeros(model.dim) if x0 is None else P @ np.asarray(x0, dtype=float)
    if x0 is None and fam == "poisson" and len(y):
        # start the intercept at the pooled log rate
        x[0] = math.log((y.sum() + 0.5) / np.exp(off).sum())
    lp = logpost(x)
    converged = False
    g = proj_grad(x)
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        if np.max(np.abs(g), initial=0.0) < GRAD_TOL:
            converged = True
            break
        target, _ = newton(x)
        step = target - x
        new_lp = logpost(target)
        halvings = 0
        while not (np.isfinite(new_lp) and new_lp >= lp - 1e-12 * abs(lp)):
            halvings += 1
            if halvings > 30:
                raise Diverged("Newton iterations for the latent mode failed", {"tau": list(map(float, tau))})
            step /= 2.0
            target = x + step
            new_lp = logpost(target)
        new_g = proj_grad(target)
        stalled = new_lp - lp <= 1e-15 * abs(lp) and np.max(np.abs(new_g)) >= np.max(np.abs(g))
        x, lp, g = target, new_lp, new_g
        if stalled:
            # rounding floor: accept if the gradient is small relative to the data
            converged = np.max(np.abs(g)) < 1e-6 * max(1.0, np.abs(y).sum())
            break
    else:
        converged = np.max(np.abs(g)) < GRAD_TOL

    eta = Ao @ x + off
    _, w = _score_weights(fam, y, eta, prec)
    Qpost = Q + Ao.T @ (w[:, None] * Ao)
    return GaussianApprox(
        mode=x,
        precision=(Qpost + Qpost.T) / 2.0,
        loglik=_loglik(fam, y, eta, prec),
        gradient_norm=float(np.max(np.abs(g), initial=0.0)),
        n_iter=it,
        converged=bool(converged),
    )


def _constrained_moments(approx: GaussianApprox, model: LatentModel, C, N):
    """Covariance of the approximation on ``C x = 0``: ``N (N'Q*N)^-1 N'``."""
    M = N.T @ approx.precision @ N
    try:
        L = linalg.cholesky(M, lower=True)
    except linalg.LinAlgError:
        raise SingularSystem("posterior precision is not positive definite on the constrained subspace") from None
    B = linalg.solve_triangular(L, N.T, lower=True)
    return B.T @ B, 2.0 * float(np.log(np.diag(L)).sum())


@dataclass
class HyperGrid:
    """Integration points in ``theta = log tau`` with normalised weights."""

    thetas: np.ndarray
    log_density: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    approximations: list = field(default_factory=list, repr=False)

    @property
    def tau_mode(self) -> np.ndarray:
        return np.exp(self.mode)

    @property
    def sigma_mode(self) -> np.ndarray:
        return np.exp(-0.5 * self.mode)


class _HyperObjective:
    """Laplace approximation to ``log p(theta | y)`` up to a constant."""

    def __init__(self, model: LatentModel, obs: Observations, priors):
        self.model, self.obs = model, obs
        self.priors = priors
        self.A, self.C = model.A, model.C
        self.N = model.null_basis()
        self.ranks = np.array([m - 2 for m in model.field_sizes], dtype=float)
        self.x = None
        self.cache = {}

    def approx(self, theta):
        key = tuple(np.round(theta, 12))
        if key not in self.cache:
            ga = gaussian_approx(self.model, self.obs, np.exp(theta), x0=self.x, mats=(self.A, self.C))
            self.x = ga.mode
            _, logdet = _constrained_moments(ga, self.model, self.C, self.N)
            self.cache[key] = (ga, logdet)
        return self.cache[key]

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        ga, logdet = self.approx(theta)
        x = ga.mode
        Q = self.model.Q_prior(np.exp(theta))
        value = ga.loglik - 0.5 * float(x @ Q @ x) + 0.5 * float(self.ranks @ theta) - 0.5 * logdet
        value += sum(pc_log_prior_logtau(t, pr) for t, pr in zip(theta, self.priors))
        return value


def _priors(model, priors):
    if priors is None:
        return (model.prior,) * 3
    priors = tuple(priors)
    if len(priors) != 3:
        raise ValidationError("give one PC prior per field")
    return priors


def prior_median_theta(prior: PCPrior) -> float:
    """``log tau`` at the prior median of ``sigma``."""
    sigma = math.log(2.0) / prior.kappa
    return -2.0 * math.log(sigma)


def log_hyper_density(model: LatentModel, obs: Observations, theta, priors=None) -> float:
    return _HyperObjective(model, obs, _priors(model, priors))(theta)


def hyper_posterior(model: LatentModel, obs: Observations, priors=None, offsets=GRID_OFFSETS) -> HyperGrid:
    """Mode of the approximate ``p(theta | y)`` and the integration grid around it."""
    priors = _priors(model, priors)
    objective = _HyperObjective(model, obs, priors)
    theta0 = np.array([prior_median_theta(p) for p in priors])

    def neg(theta):
        theta = np.clip(theta, *THETA_BOUNDS)
        try:
            return -objective(theta)
        except (Diverged, SingularSystem):
            return np.inf

    simplex = np.vstack([theta0] + [theta0 + np.eye(3)[i] for i in range(3)])
    res = optimize.minimize(
        neg, theta0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-8, "maxiter": 2000},
    )
    if not np.isfinite(res.fun):
        raise OptimFailed("hyperparameter posterior could not be evaluated")
    mode = np.clip(res.x, *THETA_BOUNDS)

    thetas = np.array([mode + np.array(d) for d in itertools.product(offsets, repeat=3)])
    logd = np.array([objective(t) for t in thetas])
    w = np.exp(logd - logd.max())
    w /= w.sum()
    approximations = [objective.approx(t) for t in thetas]
    return HyperGrid(thetas, logd, w, mode, approximations)


@dataclass
class PosteriorSummary:
    median: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    theta_mode: np.ndarray
    grid_thetas: np.ndarray
    grid_weights: np.ndarray


def mixture_cdf(x, means, sds, weights):
    """CDF of per-cell Gaussian mixtures; ``means``/``sds`` are (K, n)."""
    z = (np.asarray(x)[None, :] - means) / sds
    return np.einsum("k,kn->n", weights, special.ndtr(z))


def mixture_quantiles(means, sds, weights, probs, tol: float = QUANTILE_TOL) -> np.ndarray:
    """Quantiles of Gaussian mixtures by vectorised bisection on the CDF.

    Stops once the CDF is within ``tol`` of the target probability or the
    bracket has shrunk to rounding level. Returns an array ``(len(probs), n)``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sds = np.atleast_2d(np.asarray(sds, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if means.shape != sds.shape or means.shape[0] != len(weights):
        raise ShapeMismatch("means, sds and weights do not conform")
    if np.any(sds <= 0):
        raise ValidationError("mixture components need positive standard deviations")
    weights = weights / weights.sum()
    out = []
    for q in np.atleast_1d(probs):
        lo = (means - 12.0 * sds).min(axis=0)
        hi = (means + 12.0 * sds).max(axis=0)
        mid = (lo + hi) / 2.0
        for _ in range(200):
            mid = (lo + hi) / 2.0
            F = mixture_cdf(mid, means, sds, weights)
            done = np.abs(F - q) < tol
            below = F < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(done | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid)))):
                break
        out.append(mid)
    return np.array(out)


def posterior_eta(model: LatentModel, obs: Observations, grid: HyperGrid) -> PosteriorSummary:
    """Median and 95% bounds of ``eta`` on every cell of ``model``'s grid."""
    if len(grid.thetas) == 0:
        raise ValidationError("integration grid is empty")
    A, C = model.A, model.C
    N = model.null_basis()
    means, sds = [], []
    approximations = grid.approximations or [None] * len(grid.thetas)
    for theta, cached in zip(grid.thetas, approximations):
        ga = cached[0] if cached is not None else gaussian_approx(model, obs, np.exp(theta), mats=(A, C))
        Sigma, _ = _constrained_moments(ga, model, C, N)
        means.append(A @ ga.mode)
        var = ((A @ Sigma) * A).sum(axis=1)
        sds.append(np.sqrt(np.maximum(var, 1e-300)))
    means, sds = np.array(means), np.array(sds)
    w = grid.weights
    q = mixture_quantiles(means, sds, w, (0.5, 0.025, 0.975))
    mean = w @ means
    second = w @ (sds**2 + means**2)
    return PosteriorSummary(
        median=q[0], q025=q[1], q975=q[2], mean=mean, sd=np.sqrt(np.maximum(second - mean**2, 0.0)),
        theta_mode=grid.mode, grid_thetas=grid.thetas, grid_weights=w,
    )


def fit_apc(data: ApcDataset, train_through: int | None = None, prior: PCPrior | None = None, fixed_sd: float = 1000.0):
    """Fit on periods up to ``train_through`` and forecast the rest of ``data``.

    Returns ``(FitResult, PosteriorSummary, LatentModel)``. Forecast cells need
    no exposures since they enter through the prior only.
    """
    prior = prior or PCPrior()
    train = data if train_through is None else data.select_periods(last=train_through)
    horizon = data.n_periods - train.n_periods
    model = forecast_extend(build_latent_model(train, 0, prior, fixed_sd), horizon)
    obs = Observations.from_dataset(train)
    grid = hyper_posterior(model, obs)
    summary = posterior_eta(model, obs, grid)
    a, p = model.cells
    window = np.where(p > train.n_periods, "prediction", "estimation")
    labels = np.asarray(train.labels)[a - 1]
    periods = train.periods[0] + train.period_step * (p - 1)
    result = FitResult(f"rw2-U{prior.U:g}", labels, periods, summary.median, summary.q025, summary.q975, window)
    ga_mode = grid.approximations[int(np.argmax(grid.weights))][0]
    result.hyper = {
        "tau_mode": dict(zip(BLOCKS, grid.tau_mode.tolist())),
        "sigma_mode": dict(zip(BLOCKS, grid.sigma_mode.tolist())),
        "pc_prior": {"U": prior.U, "alpha": prior.alpha},
        "grid_points": len(grid.thetas),
        "grid_offsets": list(GRID_OFFSETS),
        "approximation": "Laplace at the hyperparameter mode, integrated over a 5-point-per-axis log-precision grid",
    }
    result.diagnostics = {
        "converged": all(ga.converged for ga, _ in grid.approximations),
        "gradient_max_norm": max(ga.gradient_norm for ga, _ in grid.approximations),
        "constraint_residual": float(np.max(np.abs(model.C @ ga_mode.mode))),
        "latent_dim": model.dim,
        "horizon": horizon,
    }
    return result, summary, model
