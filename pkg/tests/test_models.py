import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from poolcast.models import (Ar1Model, Ar1Params, Arch1Model, Arch1Params, CensoredGaussian,
                             DgpParams, Gaussian, Mixture, ar1_predictive, arch1_predictive,
                             dgp_predictive, simulate_dgp, simulate_dgp_path, stationary_quantile)
from poolcast.rng import stream


def erf_cdf(x, mean, sd):
    return float(0.5 * mpmath.erfc(-(mpmath.mpf(x) - mean) / (sd * mpmath.sqrt(2))))


def test_ar1_predictive_examples():
    F = ar1_predictive(Ar1Params(0.0, 0.0, 1.0), 7.0)
    assert F.cdf(0.0) == 0.5
    F = ar1_predictive(Ar1Params(1.0, 0.5, 2.0), 2.0)
    assert (F.mean, F.sd) == (2.0, 2.0)


def test_ar1_cdf_matches_erf_oracle():
    rng = np.random.default_rng(3)
    mpmath.mp.dps = 30
    for _ in range(1000):
        a0, a1, s = rng.normal(), rng.uniform(-0.99, 0.99), rng.uniform(0.1, 3)
        yp, y = rng.normal(0, 2), rng.normal(0, 3)
        F = ar1_predictive(Ar1Params(a0, a1, s), yp)
        assert abs(F.cdf(y) - erf_cdf(y, a0 + a1 * yp, s)) < 1e-12


def test_arch1_predictive_examples():
    for yp in (-3.0, 0.0, 10.0):
        F = arch1_predictive(Arch1Params(0.0, 0.2, 0.0), yp)
        assert F.mean == 0 and math.isclose(F.sd, math.sqrt(0.2))
    F = arch1_predictive(Arch1Params(1.0, 1.0, 0.5), 3.0)
    assert F.mean == 1 and math.isclose(F.sd, math.sqrt(3.0))


def test_arch1_variance_monotone_in_distance():
    p = Arch1Params(0.3, 0.5, 0.4)
    d = np.linspace(0, 10, 200)
    sd = arch1_predictive(p, p.mu + d).sd
    assert np.all(np.diff(sd) > 0)
    assert np.allclose(arch1_predictive(p, p.mu - d).sd, sd)


@pytest.mark.parametrize("bad", [dict(sigma=0.0), dict(sigma=-1.0), dict(alpha1=1.0)])
def test_ar1_params_invariants(bad):
    kw = dict(alpha0=0.0, alpha1=0.5, sigma=1.0) | bad
    with pytest.raises(ValueError):
        Ar1Params(**kw)


@pytest.mark.parametrize("bad", [dict(beta0=0.0), dict(beta1=1.0), dict(beta1=-0.1)])
def test_arch1_params_invariants(bad):
    kw = dict(mu=0.0, beta0=0.5, beta1=0.5) | bad
    with pytest.raises(ValueError):
        Arch1Params(**kw)


def test_dgp_params_invariants():
    for kw in (dict(censor_bound=0), dict(arch_coef=1.0), dict(burn_in=-1)):
        with pytest.raises(ValueError):
            DgpParams(**kw)


def test_dgp_predictive_atoms_and_normalisation():
    F = dgp_predictive(DgpParams(), 4.0, 0.8, 2.5)
    lo, hi = F.atom_masses()
    inner = integrate.quad(lambda y: F.pdf(y), -5, 5, epsabs=1e-13, epsrel=1e-13)[0]
    assert abs(lo + hi + inner - 1.0) < 1e-12
    F = CensoredGaussian(0.0, 1.0, -5.0, 5.0)
    mpmath.mp.dps = 30
    expected = float(0.5 * mpmath.erfc(5 / mpmath.sqrt(2)))
    assert math.isclose(F.atom_masses()[1], expected, rel_tol=1e-10)
    assert math.isclose(F.atom_masses()[1], 2.87e-7, rel_tol=0.01)
    assert math.isclose(np.exp(F.logpdf(5.0)), expected, rel_tol=1e-10)


def test_dgp_predictive_formula():
    F = dgp_predictive(DgpParams(), 1.2, 0.9, -0.7)
    assert F.mean == 0.6
    assert math.isclose(F.sd, math.sqrt(0.2 + 0.75 * 0.9 * 0.49))
    ys = np.linspace(-4.9, 4.9, 100)
    assert np.allclose(F.pdf(ys), Gaussian(F.mean, F.sd).pdf(ys), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        dgp_predictive(DgpParams(), 0.0, 0.0, 1.0)


def test_wide_censoring_matches_gaussian():
    F = dgp_predictive(DgpParams(censor_bound=50.0), 0.3, 0.8, 0.5)
    G = Gaussian(F.mean, F.sd)
    ys = np.linspace(-10, 10, 101)
    assert np.max(np.abs(F.cdf(ys) - G.cdf(ys))) < 1e-12


@pytest.mark.parametrize("F", [
    Gaussian(0.3, 1.7),
    Mixture((0.3, 0.7), (Gaussian(-1.0, 0.5), Gaussian(2.0, 1.5))),
    CensoredGaussian(0.5, 1.2, -2.0, 2.0),
])
def test_cdf_properties(F):
    ys = np.linspace(-30, 30, 2001)
    c = F.cdf(ys)
    assert np.all(np.diff(c) >= 0)
    assert F.cdf(-1e6) < 1e-12 and F.cdf(1e6) > 1 - 1e-12
    assert np.allclose(F.cdf(ys) + F.sf(ys), 1.0, atol=1e-14)
    if isinstance(F, CensoredGaussian):
        mass = integrate.quad(lambda y: F.pdf(y), F.lower, F.upper)[0]
        interior = 1.0 - sum(F.atom_masses())
    else:
        mass = integrate.quad(lambda y: F.pdf(y), -40, 40, limit=200)[0]
        interior = 1.0
    assert abs(mass - interior) < 1e-8


def test_simulation_reproducible_and_bounded():
    p = DgpParams()
    a = simulate_dgp(p, 5000, stream(5, "sim"))
    b = simulate_dgp(p, 5000, stream(5, "sim"))
    c = simulate_dgp(p, 5000, stream(6, "sim"))
    assert a == b and not np.array_equal(a.values, c.values)
    path = simulate_dgp_path(p, 5000, stream(5, "sim"))
    assert np.array_equal(path.y, a.values)
    assert np.all(np.abs(path.y) <= 5.0)
    assert np.all(path.v2 >= p.arch_const)
    assert np.array_equal(path.y, np.clip(path.x, -5, 5))


def test_simulation_recursion(dgp):
    path = simulate_dgp_path(dgp, 200, stream(9, "rec"))
    x_prev = np.concatenate(([path.x_init], path.x[:-1]))
    v2_prev = np.concatenate(([path.v2_init], path.v2[:-1]))
    z_prev = np.concatenate(([path.z_init], path.z[:-1]))
    assert np.allclose(path.v2, 0.2 + 0.75 * v2_prev * z_prev ** 2, rtol=1e-14)
    assert np.allclose(path.x, 0.5 * x_prev + np.sqrt(path.v2) * path.z, rtol=1e-13, atol=1e-15)


def test_simulated_moments(dgp):
    y = simulate_dgp(dgp, 1_000_000, stream(1, "moments")).values
    assert abs(y.mean()) < 0.01
    assert abs(y.std() - 0.93) < 0.02


def test_stationary_quantile(dgp, tmp_path):
    qs = [stationary_quantile(dgp, p, 1_000_000, 4, tmp_path) for p in (0.05, 0.1, 0.2, 0.5, 0.8)]
    assert abs(qs[3]) < 0.01
    assert qs[2] < 0 and abs(qs[2] + qs[4]) < 0.01
    assert qs[:4] == sorted(qs[:4])
    files = list(tmp_path.glob("quantile-*.json"))
    assert len(files) == 5
    # cache hit returns the persisted value
    assert stationary_quantile(dgp, 0.2, 1_000_000, 4, tmp_path) == qs[2]
    with pytest.raises(ValueError):
        stationary_quantile(dgp, 0.2, 1000, 4)
    with pytest.raises(ValueError):
        stationary_quantile(dgp, 1.0, 1_000_000, 4)


@pytest.mark.parametrize("model", [Ar1Model(), Arch1Model()])
@given(u=st.lists(st.floats(-8, 8), min_size=3, max_size=3))
@settings(max_examples=200, deadline=None)
def test_transform_round_trip(model, u):
    u = np.array(u)
    p = model.to_natural(u)
    assert model.is_valid(p)
    assert np.allclose(model.to_unconstrained(p), u, atol=1e-12 * 1e4, rtol=1e-9)
    back = model.to_natural(model.to_unconstrained(p))
    assert np.allclose(back, p, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("model", [Ar1Model(), Arch1Model()])
def test_moment_derivatives(model):
    rng = np.random.default_rng(0)
    y_prev = rng.normal(size=50)
    p = model.to_natural(rng.normal(size=3) * 0.5)
    _, _, dmean, dsd = model.moments(p, y_prev, grad=True)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        mp, sp = model.moments(p + e, y_prev)
        mm, sm = model.moments(p - e, y_prev)
        assert np.allclose((mp - mm) / (2 * h), dmean[i], atol=1e-7)
        assert np.allclose((sp - sm) / (2 * h), dsd[i], atol=1e-7)
    du = np.diag(np.diag(np.eye(3)) * model.dnatural(model.to_unconstrained(p)))
    u = model.to_unconstrained(p)
    fd = [(model.to_natural(u + h * np.eye(3)[i]) - model.to_natural(u - h * np.eye(3)[i]))[i] / (2 * h)
          for i in range(3)]
    assert np.allclose(np.diag(du), fd, rtol=1e-6)
