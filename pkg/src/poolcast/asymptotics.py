"""Sandwich covariances of the one- and two-stage pool estimators.

Both estimators are exactly identified method-of-moments estimators.  The
one-stage moment is the gradient of the pool score in all parameters.  The
two-stage moment stacks the gradient of the pool score in the weights with
each constituent's own score gradient in its parameters.  The latter does
not depend on the weights, which gives the Jacobian a zero lower-left block.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimate import BOUNDARY_LOGIT, ParameterVector, logit_coordinates, numeric_jacobian
from .pool import constituent_terms, pool_terms
from .scoring import ScoringRule
from .series import ObservedSeries

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12
QS_CONST = 1.3221
RHO_CAP = 0.97


class AsymptoticsError(ValueError):
    pass


def _values(series) -> np.ndarray:
    return series.values if isinstance(series, ObservedSeries) else np.asarray(series, dtype=float)


def _check_mode(mode):
    if mode not in ("one_stage", "two_stage"):
        raise ValueError(f"no moment system for mode {mode!r}")


def check_interior(theta: ParameterVector) -> None:
    """Raise if any weight or bounded coefficient sits on its boundary."""
    w = theta.weights.as_array()
    if theta.spec.K > 1 and (np.any(w <= 0.0) or np.any(w >= 1.0)):
        raise AsymptoticsError(
            f"pool weights {tuple(w)} lie on the simplex boundary; the normal "
            "approximation does not hold there")
    u = theta.to_unconstrained()
    names = theta.names()
    for i in logit_coordinates(theta.spec):
        if not abs(u[i]) <= BOUNDARY_LOGIT:
            raise AsymptoticsError(
                f"{names[i]} is at its boundary; the normal approximation does not hold there")


# ---------------------------------------------------------------------------
# moment contributions


def _contributions(mode, theta_vec, models, y_prev, y, rule):
    """n x d matrix of per-observation moment contributions (no checks)."""
    if mode == "one_stage":
        return pool_terms(models, theta_vec, y_prev, y, rule, grad=True)[1]
    d_eta = len(models) - 1
    full = pool_terms(models, theta_vec, y_prev, y, rule, grad=True)[1]
    cols = [full[:, :d_eta]]
    pos = d_eta
    for m in models:
        cols.append(constituent_terms(m, theta_vec[pos:pos + m.dim], y_prev, y, rule, grad=True)[1])
        pos += m.dim
    return np.concatenate(cols, axis=1)


def moment_contributions(mode: str, theta: ParameterVector, series, rule: ScoringRule,
                         check: bool = True) -> np.ndarray:
    """Per-observation moments, one row per scored index ``1..n-1``.

    ``one_stage``: gradient of the pool score in all natural parameters.
    ``two_stage``: gradient of the pool score in the weights, stacked with
    each constituent's own score gradient.
    """
    _check_mode(mode)
    if check:
        check_interior(theta)
    y = _values(series)
    return _contributions(mode, theta.natural(), theta.models, y[:-1], y[1:], rule)


@dataclass(frozen=True, eq=False)
class MomentSystem:
    mode: str
    theta: ParameterVector
    rule: ScoringRule
    contributions: np.ndarray

    @property
    def n(self) -> int:
        return self.contributions.shape[0]

    @property
    def dim(self) -> int:
        return self.contributions.shape[1]

    def mean(self) -> np.ndarray:
        return self.contributions.mean(axis=0)

    def first_order_norm(self) -> float:
        return float(np.linalg.norm(self.mean()))


def moment_system(mode, theta, series, rule) -> MomentSystem:
    return MomentSystem(mode, theta, rule, moment_contributions(mode, theta, series, rule))


# ---------------------------------------------------------------------------
# Jacobian


def jacobian(mode: str, theta: ParameterVector, series, rule: ScoringRule,
             step: float = 1e-5, check: bool = True) -> np.ndarray:
    """Central-difference Jacobian of the mean moment in natural parameters."""
    _check_mode(mode)
    if check:
        check_interior(theta)
    y = _values(series)
    y_prev, y_now, models = y[:-1], y[1:], theta.models

    def mean_moment(vec):
        return _contributions(mode, vec, models, y_prev, y_now, rule).mean(axis=0)

    M = numeric_jacobian(mean_moment, theta.natural(), step=step)
    if mode == "two_stage":
        d_eta = theta.spec.d_eta
        lower_left = M[d_eta:, :d_eta]
        if np.any(lower_left != 0.0):
            raise AssertionError("constituent moments must not depend on the weights")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise AsymptoticsError(f"Jacobian is singular (condition number {cond:.3g})")
    return M


# ---------------------------------------------------------------------------
# long-run variance


def qs_kernel(x):
    """Quadratic-spectral kernel, with k(0) = 1."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    a = 6.0 * np.pi * x[nz] / 5.0
    out[nz] = 25.0 / (12.0 * np.pi ** 2 * x[nz] ** 2) * (np.sin(a) / a - np.cos(a))
    return out


def _autocovariances(u: np.ndarray) -> np.ndarray:
    """Gamma_j = (1/T) sum_t u_{t+j} u_t' for j = 0..T-1, via FFT."""
    T, d = u.shape
    nfft = 1 << int(math.ceil(math.log2(2 * T)))
    F = np.fft.rfft(u, n=nfft, axis=0)
    cross = np.einsum("fa,fb->fab", F, F.conj())
    G = np.fft.irfft(cross, n=nfft, axis=0)[:T]
    return G / T


def andrews_bandwidth(u: np.ndarray) -> float:
    """Automatic QS bandwidth from per-column AR(1) fits with unit weights."""
    T = u.shape[0]
    num = den = 0.0
    for col in u.T:
        x0, x1 = col[:-1], col[1:]
        ss = float(x0 @ x0)
        if ss <= 0.0:
            continue
        rho = float(x0 @ x1) / ss
        if abs(rho) > RHO_CAP:
            log.debug("AR(1) coefficient %.4f capped at %.2f for bandwidth selection", rho, RHO_CAP)
            rho = math.copysign(RHO_CAP, rho)
        s2 = float(np.mean((x1 - rho * x0) ** 2))
        num += 4.0 * rho ** 2 * s2 ** 2 / (1.0 - rho) ** 8
        den += s2 ** 2 / (1.0 - rho) ** 4
    if den == 0.0:
        return 0.0
    return QS_CONST * (num / den * T) ** 0.2


@dataclass(frozen=True)
class LongRunVariance:
    V: np.ndarray
    bandwidth: float
    psd_repair: float
    prewhiten: bool


def long_run_variance(contributions, prewhiten: bool = False, demean: bool = True,
                      full: bool = False):
    """HAC long-run covariance with a quadratic-spectral kernel.

    Uses Andrews' automatic bandwidth (AR(1) plug-in).  If the estimate is
    indefinite its negative eigenvalues are floored at zero and the size of
    the repair is logged.  With ``prewhiten`` a VAR(1) filter is applied first
    and the result recoloured.
    """
    u = np.asarray(contributions, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T, d = u.shape
    if T < 50:
        raise ValueError("need at least 50 observations for a long-run variance")
    if demean:
        u = u - u.mean(axis=0)
    A = None
    if prewhiten:
        X, Y = u[:-1], u[1:]
        A = np.linalg.lstsq(X, Y, rcond=None)[0].T
        u = Y - X @ A.T
        T = u.shape[0]
    bw = andrews_bandwidth(u)
    G = _autocovariances(u)
    V = G[0].copy()
    if bw > 0:
        w = qs_kernel(np.arange(1, T) / bw)
        S = np.einsum("j,jab->ab", w, G[1:])
        V += S + S.T
    if A is not None:
        B = np.linalg.inv(np.eye(d) - A)
        V = B @ V @ B.T
    V = 0.5 * (V + V.T)
    vals, vecs = np.linalg.eigh(V)
    repair = float(-vals[vals < 0].sum()) if np.any(vals < 0) else 0.0
    if repair > 0:
        log.info("long-run variance: floored negative eigenvalues (total %.3g)", repair)
        V = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        V = 0.5 * (V + V.T)
    if full:
        return LongRunVariance(V, bw, repair, prewhiten)
    return V


# ---------------------------------------------------------------------------
# sandwich


def _matrix(a) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


@dataclass(frozen=True, eq=False)
class SandwichCovariance:
    mode: str
    theta: ParameterVector
    rule: ScoringRule
    n: int
    M: np.ndarray
    V: np.ndarray
    W: np.ndarray
    bandwidth: float
    psd_repair: float
    first_order_norm: float
    blocks: dict = field(default_factory=dict)

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.M))

    def standard_errors(self) -> np.ndarray:
        """Finite-sample standard errors sqrt(diag(W) / n)."""
        return np.sqrt(np.diag(self.W) / self.n)

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "rule": self.rule.to_dict(), "n": self.n,
             "theta": self.theta.to_dict(), "names": self.theta.names(),
             "M": _matrix(self.M), "V": _matrix(self.V), "W": _matrix(self.W),
             "condition_number_M": self.condition_number, "bandwidth": self.bandwidth,
             "psd_repair": self.psd_repair, "first_order_norm": self.first_order_norm}
        for k, v in self.blocks.items():
            d[k] = _matrix(v)
        return d


def _sym(a):
    return 0.5 * (a + a.T)


def two_stage_blocks(M: np.ndarray, V: np.ndarray, d_eta: int) -> dict:
    """Block pieces of the two-stage sandwich.

    With ``M = [[G_eta, G_gamma], [0, M_gamma]]`` the weight marginal is
    ``G_eta^-1 V_eta G_eta^-1'`` with ``V_eta = A V A'`` and
    ``A = [I, -G_gamma M_gamma^-1]``.
    """
    G_eta, G_gamma, M_gamma = M[:d_eta, :d_eta], M[:d_eta, d_eta:], M[d_eta:, d_eta:]
    Mg_inv = np.linalg.inv(M_gamma)
    G_inv = np.linalg.inv(G_eta)
    A = np.hstack([np.eye(d_eta), -G_gamma @ Mg_inv])
    V_eta = _sym(A @ V @ A.T)
    M_inv = np.zeros_like(M)
    M_inv[:d_eta, :d_eta] = G_inv
    M_inv[:d_eta, d_eta:] = -G_inv @ G_gamma @ Mg_inv
    M_inv[d_eta:, d_eta:] = Mg_inv
    return {
        "G_eta": G_eta, "G_gamma": G_gamma, "M_gamma": M_gamma,
        "V_eta": V_eta,
        "W_eta": _sym(G_inv @ V_eta @ G_inv.T),
        "W_gamma_gamma": _sym(Mg_inv @ V[d_eta:, d_eta:] @ Mg_inv.T),
        "M_inverse": M_inv,
    }


def sandwich(mode: str, theta: ParameterVector, series, rule: ScoringRule, *,
             prewhiten: bool = False, step: float = 1e-5) -> SandwichCovariance:
    """``W = M^-1 V M^-1'`` for the given estimator at ``theta``."""
    contrib = moment_contributions(mode, theta, series, rule)
    M = jacobian(mode, theta, series, rule, step=step, check=False)
    lrv = long_run_variance(contrib, prewhiten=prewhiten, full=True)
    M_inv = np.linalg.inv(M)
    W = _sym(M_inv @ lrv.V @ M_inv.T)
    blocks = {}
    if mode == "two_stage":
        blocks = two_stage_blocks(M, lrv.V, theta.spec.d_eta)
    return SandwichCovariance(mode, theta, rule, contrib.shape[0], M, lrv.V, W,
                              lrv.bandwidth, lrv.psd_repair,
                              float(np.linalg.norm(contrib.mean(axis=0))), blocks)


def first_stage_irrelevance_gap(system) -> tuple[np.ndarray, float]:
    """``G_gamma`` and its Frobenius norm.

    Treating the first-stage estimates as known gives valid weight inference
    only when this block is zero.  ``system`` is a two-stage
    ``SandwichCovariance`` or a full two-stage Jacobian with ``d_eta``
    inferred from a ``(M, d_eta)`` pair.
    """
    if isinstance(system, SandwichCovariance):
        if system.mode != "two_stage":
            raise ValueError("needs a two-stage system")
        G = system.blocks["G_gamma"]
    else:
        M, d_eta = system
        G = np.asarray(M)[:d_eta, d_eta:]
    return G, float(np.linalg.norm(G))
