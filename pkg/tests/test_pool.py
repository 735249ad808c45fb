import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poolcast.models import Ar1Params, Arch1Params, Gaussian, ar1_predictive, arch1_predictive
from poolcast.pool import (CombinationSpec, WeightVector, pool_density_function,
                           pool_log_density, pool_predictive, pool_terms)
from poolcast.scoring import LOG_SCORE, average_score, censored_log_score

AR = Ar1Params(0.1, 0.5, 0.9)
ARCH = Arch1Params(-0.1, 0.3, 0.6)
YS = np.linspace(-6, 6, 121)


def spec(eta):
    return CombinationSpec(("ar1", "arch1"), WeightVector.pair(eta))


def test_degenerate_weights():
    for yp in (-2.0, 0.0, 1.3):
        F1 = pool_predictive(spec(1.0), [AR, ARCH], yp)
        F0 = pool_predictive(spec(0.0), [AR, ARCH], yp)
        assert np.array_equal(F1.cdf(YS), ar1_predictive(AR, yp).cdf(YS))
        assert np.array_equal(F0.cdf(YS), arch1_predictive(ARCH, yp).cdf(YS))
        assert np.allclose(pool_log_density(spec(1.0), [AR, ARCH], yp, YS),
                           ar1_predictive(AR, yp).logpdf(YS), rtol=0, atol=1e-15)


def test_symmetric_pool():
    from poolcast.models import Mixture
    F = Mixture((0.5, 0.5), (Gaussian(-1.0, 1.0), Gaussian(1.0, 1.0)))
    assert math.isclose(F.cdf(0.0), 0.5, abs_tol=1e-15)


def test_log_density_matches_direct_sum():
    rng = np.random.default_rng(2)
    for _ in range(200):
        eta = rng.uniform()
        yp, y = rng.normal(0, 2), rng.normal(0, 2)
        direct = math.log(eta * ar1_predictive(AR, yp).pdf(y)
                          + (1 - eta) * arch1_predictive(ARCH, yp).pdf(y))
        assert abs(pool_log_density(spec(eta), [AR, ARCH], yp, y) - direct) < 1e-12


def test_far_tail_finite():
    for yp in (0.0, 3.0):
        F = ar1_predictive(AR, yp)
        v = pool_log_density(spec(0.4), [AR, ARCH], yp, F.mean + 40 * F.sd)
        assert np.isfinite(v)


@given(st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_pool_cdf_valid(eta):
    F = pool_predictive(spec(eta), [AR, ARCH], 0.7)
    c = F.cdf(np.linspace(-50, 50, 1001))
    assert np.all(np.diff(c) >= 0) and c[0] < 1e-12 and c[-1] > 1 - 1e-12


def test_weight_vector():
    assert WeightVector.pair(0.3).eta == (0.3, 0.7)
    assert WeightVector.from_free([0.2, 0.3]).eta == (0.2, 0.3, 0.5)
    for bad in ((0.5, 0.6), (-0.1, 1.1)):
        with pytest.raises(ValueError):
            WeightVector(bad)
    with pytest.raises(ValueError):
        WeightVector.pair(1.5)
    with pytest.raises(ValueError):
        CombinationSpec(("ar1", "arch1"), WeightVector((0.2, 0.3, 0.5)))
    s = CombinationSpec()
    assert s.dim == 7 and s.param_names()[0] == "eta_ar1"


def test_score_continuous_in_eta(dgp_series):
    # the mean score is concave in eta, so its derivative is monotone and each
    # grid step is bounded by the larger endpoint slope
    y = dgp_series.values
    models = CombinationSpec().constituents
    grid = np.linspace(0, 1, 1001)
    rest = np.concatenate([AR.natural(), ARCH.natural()])
    vals, slopes = [], []
    for e in grid:
        v, g = pool_terms(models, np.r_[e, rest], y[:-1], y[1:], LOG_SCORE, grad=True)
        vals.append(v.mean())
        slopes.append(g[:, 0].mean())
    vals, slopes = np.array(vals), np.abs(slopes)
    assert np.all(np.isfinite(vals))
    bound = np.maximum(slopes[:-1], slopes[1:]) * np.diff(grid)
    assert np.all(np.abs(np.diff(vals)) <= bound * (1 + 1e-9) + 1e-14)


@pytest.mark.parametrize("rule", [LOG_SCORE, censored_log_score(-0.6)])
def test_eta_derivative_matches_fd(dgp_series, rule):
    y = dgp_series.values
    models = CombinationSpec().constituents
    theta = np.r_[0.4, AR.natural(), ARCH.natural()]
    _, g = pool_terms(models, theta, y[:-1], y[1:], rule, grad=True)
    g = g.mean(axis=0)
    h = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (pool_terms(models, theta + e, y[:-1], y[1:], rule).mean()
              - pool_terms(models, theta - e, y[:-1], y[1:], rule).mean()) / (2 * h)
        assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_engine_matches_distribution_path(dgp_series):
    y = dgp_series.values
    models = CombinationSpec().constituents
    theta = np.r_[0.35, AR.natural(), ARCH.natural()]
    for rule in (LOG_SCORE, censored_log_score(-0.6)):
        a = pool_terms(models, theta, y[:-1], y[1:], rule).mean()
        b = average_score(rule, pool_density_function(models, theta), y)
        assert abs(a - b) < 1e-12
