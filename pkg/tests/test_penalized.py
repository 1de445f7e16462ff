import itertools

import numpy as np
import pytest
from scipy import optimize
from scipy.special import gammaln

from apcsmooth.design import BasisSpec, build_design
from apcsmooth.errors import MissingExposure, ValidationError
from apcsmooth.penalized import (
    fit_apc,
    forecast,
    gcv_score,
    intervals,
    penalized_gradient,
    penalized_irls,
    penalized_loglik,
    pirls,
    select_lambda,
)

from conftest import make_dataset, synthetic_grid


def _poisson_negloglik(beta, X, y, off):
    eta = X @ beta + off
    return -(y @ eta - np.exp(eta).sum() - gammaln(y + 1).sum())


def _linear_truth(I=8, J=12, width=5):
    mids = 10 + width / 2 + width * np.arange(I)
    years = 2000 + np.arange(J)
    A, P = np.meshgrid(mids, years, indexing="ij")
    eta = np.log(2e-4) + 0.03 * (A - 40) - 0.02 * (P - 2005)
    N = np.full((I, J), 1e6)
    return N * np.exp(eta), N, eta


@pytest.fixture(scope="module")
def small():
    data, eta = synthetic_grid(I=8, J=10, seed=3, exposure=2e6)
    design = build_design(data, "spline", BasisSpec("crs", (6, 6, 8)))
    return data, eta, design


class TestPirlsOracles:
    def test_glm_limit(self, small):
        # with huge penalties only the intercept and two slopes remain free
        data, _, design = small
        fit = pirls(design, data, [1e12] * 3)
        X, y, off = design.fixed, data.counts.ravel().astype(float), np.log(data.exposures.ravel())
        res = optimize.minimize(
            _poisson_negloglik, np.array([np.log(y.sum() / np.exp(off).sum()), 0, 0]), args=(X, y, off),
            jac=lambda b, X, y, off: -X.T @ (y - np.exp(X @ b + off)), method="BFGS", options={"gtol": 1e-10},
        )
        np.testing.assert_allclose(fit.beta_hat[:3], res.x, atol=1e-4)
        mu = np.exp(X @ res.x + off)
        cov = np.linalg.inv(X.T @ (mu[:, None] * X))
        se_glm = np.sqrt(np.einsum("ij,jk,ik->i", X, cov, X))
        eta, lo, hi = intervals(fit, design)
        np.testing.assert_allclose((hi - lo) / (2 * 1.96), se_glm, atol=1e-3)
        np.testing.assert_allclose(eta, X @ res.x, atol=1e-4)

    def test_matches_general_optimizer(self, rng):
        counts = rng.poisson(40, size=(6, 6))
        data = make_dataset(counts, np.full((6, 6), 1e5), width=1)
        design = build_design(data, "spline", BasisSpec("crs", (5, 5, 6)))
        lam = np.array([1.0, 10.0, 100.0])
        fit = pirls(design, data, lam)
        X, y, off = design.X, counts.ravel().astype(float), np.log(data.exposures.ravel())
        pen = design.penalties()

        def f(b):
            return -penalized_loglik(b, X, y, off, pen, lam)

        def g(b):
            return -penalized_gradient(b, X, y, off, pen, lam)

        def h(b):
            mu = np.exp(X @ b + off)
            H = X.T @ (mu[:, None] * X)
            for (sl, S), l in zip(pen, lam):
                H[sl, sl] += l * S
            return H

        res = optimize.minimize(f, np.zeros(X.shape[1]), jac=g, hess=h, method="trust-exact", options={"gtol": 1e-12})
        np.testing.assert_allclose(fit.beta_hat, res.x, atol=1e-6)

    def test_gradient_finite_difference(self, small, rng):
        data, _, design = small
        X, y, off = design.X, data.counts.ravel().astype(float), np.log(data.exposures.ravel())
        pen, lam = design.penalties(), np.array([0.5, 2.0, 8.0])
        beta = pirls(design, data, lam).beta_hat + 0.01 * rng.normal(size=X.shape[1])
        grad = penalized_gradient(beta, X, y, off, pen, lam)
        h = 1e-6
        fd = np.array([
            (penalized_loglik(beta + h * e, X, y, off, pen, lam) - penalized_loglik(beta - h * e, X, y, off, pen, lam)) / (2 * h)
            for e in np.eye(len(beta))
        ])
        np.testing.assert_allclose(fd, grad, rtol=1e-5, atol=1e-5 * np.abs(grad).max())

    def test_stationary_at_solution(self, small):
        data, _, design = small
        fit = pirls(design, data, [1.0, 1.0, 1.0])
        assert fit.converged
        assert fit.gradient_norm < 1e-6

    def test_gaussian_family_closed_form(self, rng):
        X = np.column_stack([np.ones(30), rng.normal(size=(30, 4))])
        y = X @ rng.normal(size=5) + 0.1 * rng.normal(size=30)
        S = np.eye(4)
        fit = penalized_irls(X, y, [(slice(1, 5), S)], [3.0], family="gaussian")
        P = np.zeros((5, 5))
        P[1:, 1:] = 3.0 * S
        np.testing.assert_allclose(fit.beta_hat, np.linalg.solve(X.T @ X + P, X.T @ y), atol=1e-10)

    def test_invalid_lambdas(self, small):
        data, _, design = small
        with pytest.raises(ValidationError):
            pirls(design, data, [1.0, 0.0, 1.0])
        with pytest.raises(ValidationError):
            penalized_irls(design.X, data.counts.ravel(), design.penalties(), [1.0, 1.0])


class TestFitProperties:
    @pytest.mark.parametrize("lam", [[1e-3] * 3, [1.0, 10.0, 0.1], [1e4] * 3])
    def test_vb_spd_and_edf_bounds(self, small, lam):
        data, _, design = small
        fit = pirls(design, data, lam)
        np.testing.assert_allclose(fit.Vb, fit.Vb.T, atol=0)
        assert np.linalg.eigvalsh(fit.Vb).min() > 0
        assert 3.0 - 1e-8 <= fit.edf <= design.n_coef + 1e-8

    def test_edf_decreases_with_lambda(self, small):
        data, _, design = small
        edfs = [pirls(design, data, [l] * 3).edf for l in (1e-2, 1.0, 1e2, 1e4)]
        assert all(a > b for a, b in zip(edfs, edfs[1:]))

    def test_deviance_increases_with_lambda(self, small):
        data, _, design = small
        lam, fit = select_lambda(design, data)
        assert fit.deviance <= pirls(design, data, 10 * lam).deviance + 1e-9

    def test_gcv_beats_grid(self, small):
        data, _, design = small
        lam, fit = select_lambda(design, data)
        best = gcv_score(fit)
        grid = np.linspace(-4.0, 12.0, 5)
        scores = [gcv_score(pirls(design, data, np.exp(r))) for r in itertools.product(grid, repeat=3)]
        assert best <= min(scores) + 1e-9

    def test_linear_truth_shrinks_curvature(self):
        # GCV undersmooths on some draws, so look at the typical replicate
        mu, N, _ = _linear_truth(I=12, J=16)
        edf = []
        for seed in range(6):
            data = make_dataset(np.random.default_rng(seed).poisson(mu), N, first_age=10)
            design = build_design(data, "spline", BasisSpec("crs", (8, 8, 10)))
            edf.append(select_lambda(design, data)[1].edf_blocks)
        assert np.all(np.median(edf, axis=0) < 1.5)

    def test_wiggly_truth_keeps_curvature(self):
        data, _ = synthetic_grid(I=15, J=18, seed=1, exposure=2e7, curvature=2.0)
        design = build_design(data, "spline", BasisSpec("crs", (10, 10, 12)))
        _, fit = select_lambda(design, data)
        assert fit.edf_blocks[0] > 3

    def test_slope_choice_does_not_change_eta(self, small):
        data, _, design = small
        lam = [0.7, 3.0, 20.0]
        e1 = design.X @ pirls(design, data, lam).beta_hat
        alt = build_design(data, "spline", BasisSpec("crs", (6, 6, 8)), slopes=("period", "cohort"))
        e2 = alt.X @ pirls(alt, data, lam).beta_hat
        np.testing.assert_allclose(e1, e2, atol=1e-6)


class TestForecast:
    def test_horizon_zero_is_training(self, small):
        data, _, design = small
        fit = pirls(design, data, [1.0] * 3)
        res = forecast(fit, design, 0)
        eta, lo, hi = intervals(fit, design)
        np.testing.assert_array_equal(res.eta_hat, eta)
        np.testing.assert_array_equal(res.lower, lo)
        assert set(res.window) == {"estimation"}

    def test_widths_grow_with_horizon(self, small):
        data, _, design = small
        fit = pirls(design, data, [1.0] * 3)
        res = forecast(fit, design, 4)
        width = (res.upper - res.lower).reshape(design.I, 4)
        assert np.all(np.diff(width, axis=1) > 0)
        _, lo, hi = intervals(fit, design)
        train_last = (hi - lo).reshape(design.I, design.J)[:, -1]
        assert np.all(train_last <= width[:, 0])

    def test_linear_truth_extends_linearly(self):
        # noise-free means as responses: the fit reproduces the plane exactly
        mu, N, eta = _linear_truth(I=8, J=12)
        data = make_dataset(np.round(mu[:, :9]), N[:, :9], first_age=10)
        design = build_design(data, "spline", BasisSpec("crs", (6, 6, 8)))
        fit = penalized_irls(design.X, mu[:, :9].ravel(), design.penalties(), [1e3] * 3, np.log(N[:, :9].ravel()))
        res = forecast(fit, design, 3)
        np.testing.assert_allclose(res.eta_hat, eta[:, 9:].ravel(), atol=1e-6)

    def test_missing_exposure(self, small):
        data, _, design = small
        fit = pirls(design, data, [1.0] * 3)
        with pytest.raises(MissingExposure):
            forecast(fit, design, 2, full_data=data)
        with pytest.raises(ValidationError):
            forecast(fit, design, -1)


class TestFitApc:
    def test_windows_and_metadata(self):
        data, _ = synthetic_grid(I=10, J=12, seed=2)
        res, fit, design = fit_apc(data, 2009, "tprs", (6, 6, 8))
        assert len(res) == 120
        assert np.sum(res.window == "prediction") == 20
        assert design.J == 10
        assert res.engine == "spline-tprs"
        assert res.hyper["selection"] == "GCV"
        assert res.diagnostics["converged"]
        assert np.all(res.lower < res.eta_hat) and np.all(res.eta_hat < res.upper)

    def test_fixed_lambdas_recorded(self):
        data, _ = synthetic_grid(I=10, J=12, seed=2)
        res, fit, _ = fit_apc(data, None, "bs", (6, 6, 8), lambdas=[1.0, 2.0, 3.0])
        assert res.hyper["selection"] == "fixed"
        assert res.hyper["lambdas"] == {"age": 1.0, "period": 2.0, "cohort": 3.0}
