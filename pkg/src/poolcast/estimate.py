"""Score-maximising estimation of constituent models and their linear pool.

All optimisation happens in an unconstrained space (logit for the pool
weight, the AR coefficient and the ARCH coefficient; log for the variance
parameters) with BFGS, followed by a short Newton refinement that uses a
finite-difference Hessian of the analytic gradient.  The refinement is what
lets first-order conditions reach ~1e-10, which BFGS alone rarely does
because its line search runs out of floating-point resolution in the
objective first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import cache
from .models import DgpParams, simulate_dgp_path
from .pool import CombinationSpec, DEFAULT_SPEC, WeightVector, constituent_terms, pool_terms
from .rng import derive_seed, stream
from .scoring import ScoringRule
from .series import ObservedSeries

log = logging.getLogger(__name__)

MODES = ("one_stage", "two_stage", "two_stage_fixed_weight")
BOUNDARY_LOGIT = 12.0
GTOL = 1e-8
MAXITER = 500
N_STARTS = 5
MIN_OBS = 30


class EstimationError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None, diagnostics=None):
        self.stage = stage
        self.diagnostics = diagnostics or []
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# parameter vector and transforms


def _eta_to_natural(u):
    """Additive log-ratio: K-1 free coordinates to K-1 free weights."""
    u = np.asarray(u, dtype=float)
    if u.size == 1:
        return np.array([1.0 / (1.0 + math.exp(-u[0]))]) if u[0] > -700 else np.array([0.0])
    top = max(0.0, float(u.max()))
    e = np.exp(u - top)
    return e / (math.exp(-top) + e.sum())


def _eta_to_unconstrained(free):
    free = np.asarray(free, dtype=float)
    last = 1.0 - free.sum()
    with np.errstate(divide="ignore"):
        return np.log(free) - math.log(last) if last > 0 else np.full(free.size, np.inf)


def _eta_jacobian(u):
    w = _eta_to_natural(u)
    return np.diag(w) - np.outer(w, w)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Stacked ``[eta', gamma_1', ..., gamma_K']'`` in natural coordinates.

    For the default two-model pool the natural vector is
    ``(eta, alpha0, alpha1, sigma2, mu, beta0, beta1)`` where ``eta`` is the
    weight on the AR(1) predictive.
    """

    spec: CombinationSpec
    weights: WeightVector
    gammas: tuple

    def __post_init__(self):
        gammas = tuple(np.array(g, dtype=float) for g in self.gammas)
        if len(gammas) != self.spec.K or self.weights.K != self.spec.K:
            raise ValueError("parameter blocks do not match the combination spec")
        for m, g in zip(self.spec.constituents, gammas):
            if g.size != m.dim:
                raise ValueError(f"{m.name} expects {m.dim} parameters")
            g.setflags(write=False)
        object.__setattr__(self, "gammas", gammas)

    @property
    def models(self):
        return self.spec.constituents

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def eta(self) -> float:
        """Weight on the first constituent."""
        return self.weights.eta[0]

    def natural(self) -> np.ndarray:
        return np.concatenate([self.weights.free()] + list(self.gammas))

    @classmethod
    def from_natural(cls, spec: CombinationSpec, theta) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float)
        if theta.size != spec.dim:
            raise ValueError(f"expected {spec.dim} parameters, got {theta.size}")
        d = spec.d_eta
        free = theta[:d]
        gammas, pos = [], d
        for m in spec.constituents:
            gammas.append(theta[pos:pos + m.dim])
            pos += m.dim
        w = np.append(free, 1.0 - free.sum())
        w = np.where(np.abs(w) < 1e-15, 0.0, w)
        return cls(spec, WeightVector(tuple(w)), tuple(gammas))

    def to_unconstrained(self) -> np.ndarray:
        parts = [_eta_to_unconstrained(self.weights.free())] if self.spec.d_eta else []
        parts += [m.to_unconstrained(g) for m, g in zip(self.models, self.gammas)]
        return np.concatenate(parts)

    @classmethod
    def from_unconstrained(cls, spec: CombinationSpec, u) -> "ParameterVector":
        u = np.asarray(u, dtype=float)
        d = spec.d_eta
        parts = [_eta_to_natural(u[:d])] if d else []
        pos = d
        for m in spec.constituents:
            parts.append(m.to_natural(u[pos:pos + m.dim]))
            pos += m.dim
        return cls.from_natural(spec, np.concatenate(parts))

    def is_valid(self) -> bool:
        return all(m.is_valid(g) for m, g in zip(self.models, self.gammas))

    def constituent_params(self) -> list:
        return [m.params(g) for m, g in zip(self.models, self.gammas)]

    def names(self) -> list[str]:
        return self.spec.param_names()

    def with_weights(self, weights: WeightVector) -> "ParameterVector":
        return ParameterVector(self.spec, weights, self.gammas)

    def to_dict(self) -> dict:
        return {"constituents": [m.name for m in self.models],
                "names": self.names(),
                "natural": [float(x) for x in self.natural()],
                "weights": list(self.weights.eta)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterVector":
        spec = CombinationSpec(tuple(d["constituents"]))
        return cls.from_natural(spec, d["natural"])

    def __repr__(self):
        vals = ", ".join(f"{k}={v:.6g}" for k, v in zip(self.names(), self.natural()))
        return f"ParameterVector({vals})"


def transform_jacobian(spec: CombinationSpec, u) -> np.ndarray:
    """d(natural)/d(unconstrained) at ``u`` (block diagonal)."""
    u = np.asarray(u, dtype=float)
    J = np.zeros((spec.dim, spec.dim))
    d = spec.d_eta
    if d:
        J[:d, :d] = _eta_jacobian(u[:d])
    pos = d
    for m in spec.constituents:
        J[pos:pos + m.dim, pos:pos + m.dim] = np.diag(m.dnatural(u[pos:pos + m.dim]))
        pos += m.dim
    return J


def logit_coordinates(spec: CombinationSpec) -> list[int]:
    coords = list(range(spec.d_eta))
    pos = spec.d_eta
    for m in spec.constituents:
        coords += [pos + c for c in m.logit_coords()]
        pos += m.dim
    return coords


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True, eq=False)
class EstimationResult:
    estimate: ParameterVector
    achieved_score: float
    converged: bool
    iterations: int
    gradient_norm: float
    starts_used: int
    mode: str
    rule: ScoringRule
    n_obs: int
    boundary: tuple = ()
    message: str = ""
    stages: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rule": self.rule.to_dict(),
            "estimate": self.estimate.to_dict(),
            "achieved_score": self.achieved_score,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "starts_used": self.starts_used,
            "n_obs": self.n_obs,
            "scored_from_index": 1,
            "boundary": list(self.boundary),
            "message": self.message,
            "stages": [s.to_dict() for s in self.stages],
        }


@dataclass(frozen=True, eq=False)
class ReferenceOptimum:
    theta: ParameterVector
    source_sample_size: int
    score_kind: ScoringRule
    mode: str
    achieved_score: float
    seed: int

    def __post_init__(self):
        if self.source_sample_size < 100_000:
            raise ValueError("reference optima need at least 1e5 observations")

    def to_dict(self) -> dict:
        return {"theta": self.theta.to_dict(), "source_sample_size": self.source_sample_size,
                "score_kind": self.score_kind.to_dict(), "mode": self.mode,
                "achieved_score": self.achieved_score, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceOptimum":
        return cls(ParameterVector.from_dict(d["theta"]), int(d["source_sample_size"]),
                   ScoringRule.from_dict(d["score_kind"]), d["mode"],
                   float(d["achieved_score"]), int(d["seed"]))


# ---------------------------------------------------------------------------
# objectives


def _values(series) -> np.ndarray:
    y = series.values if isinstance(series, ObservedSeries) else np.asarray(series, dtype=float)
    if y.size < MIN_OBS:
        raise ValueError(f"need at least {MIN_OBS} observations, got {y.size}")
    return y


class _Objective:
    """Negative mean in-sample score as a function of unconstrained parameters."""

    def __init__(self, spec: CombinationSpec, y: np.ndarray, rule: ScoringRule,
                 gradient: str = "analytic"):
        self.spec = spec
        self.models = spec.constituents
        self.y_prev = y[:-1]
        self.y = y[1:]
        self.rule = rule
        self.gradient = gradient
        self.evals = 0

    def natural(self, u):
        return ParameterVector.from_unconstrained(self.spec, u).natural()

    def mean_score(self, theta) -> float:
        return float(np.mean(pool_terms(self.models, theta, self.y_prev, self.y, self.rule)))

    def _value(self, u) -> float:
        try:
            theta = self.natural(u)
        except (ValueError, OverflowError):
            return np.inf
        with np.errstate(all="ignore"):
            val = -self.mean_score(theta)
        return val if np.isfinite(val) else np.inf

    def value_grad(self, u):
        self.evals += 1
        if self.gradient == "numeric":
            return self._value(u), numeric_gradient(self._value, u)
        try:
            theta = self.natural(u)
        except (ValueError, OverflowError):
            return np.inf, np.zeros_like(u)
        with np.errstate(all="ignore"):
            vals, grads = pool_terms(self.models, theta, self.y_prev, self.y, self.rule, grad=True)
            val = -float(np.mean(vals))
            g_nat = -grads.mean(axis=0)
        if not np.isfinite(val) or not np.all(np.isfinite(g_nat)):
            return np.inf, np.zeros_like(u)
        return val, transform_jacobian(self.spec, u).T @ g_nat

    def grad(self, u):
        return self.value_grad(u)[1]


def numeric_gradient(f, x, step=None):
    """Central differences with step ``eps**(1/3) * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    h0 = np.finfo(float).eps ** (1.0 / 3.0) if step is None else step
    g = np.empty_like(x)
    for i in range(x.size):
        h = h0 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
    return g


def numeric_jacobian(fun, x, step=1e-5):
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (xp[i] - xm[i])
    return J


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class _Run:
    u: np.ndarray
    score: float
    converged: bool
    iterations: int
    gnorm: float
    start: int
    message: str


def _newton_polish(obj: _Objective, u, f, g, gtol, steps=6):
    for _ in range(steps):
        if np.max(np.abs(g)) <= 1e-3 * gtol:
            break
        H = numeric_jacobian(obj.grad, u)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        u_new = u + step
        f_new, g_new = obj.value_grad(u_new)
        if not np.isfinite(f_new) or f_new > f + 1e-12 * (1.0 + abs(f)):
            break
        if np.max(np.abs(g_new)) >= np.max(np.abs(g)):
            break
        u, f, g = u_new, f_new, g_new
    return u, f, g


def _run_start(obj: _Objective, u0, gtol, maxiter, start_idx, logit_idx):
    res = optimize.minimize(obj.value_grad, u0, jac=True, method="BFGS",
                            options={"gtol": gtol, "maxiter": maxiter})
    u, nit = res.x, int(res.nit)
    f, g = obj.value_grad(u)
    message = str(res.message)
    if np.max(np.abs(g)) > gtol and np.isfinite(f):
        # fresh curvature estimate, then Newton refinement
        if nit < maxiter:
            res2 = optimize.minimize(obj.value_grad, u, jac=True, method="BFGS",
                                     options={"gtol": gtol, "maxiter": maxiter - nit})
            if res2.fun <= f:
                u, nit = res2.x, nit + int(res2.nit)
                f, g = obj.value_grad(u)
                message = str(res2.message)
        at_edge = any(abs(u[i]) > BOUNDARY_LOGIT for i in logit_idx)
        if not at_edge and np.isfinite(f):
            u, f, g = _newton_polish(obj, u, f, g, gtol)
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    converged = bool(np.isfinite(f) and gnorm <= gtol)
    return _Run(u, -f, converged, nit, gnorm, start_idx, message)


def _latin_starts(box: np.ndarray, n: int, seed: int) -> np.ndarray:
    if n <= 0:
        return np.empty((0, box.shape[0]))
    sampler = qmc.LatinHypercube(d=box.shape[0], seed=seed)
    return qmc.scale(sampler.random(n), box[:, 0], box[:, 1])


def _pick_best(runs: list[_Run], spec) -> _Run:
    pool = [r for r in runs if r.converged] or runs
    pool = [r for r in pool if np.isfinite(r.score)]
    if not pool:
        raise EstimationError("no start produced a finite score")
    best = max(r.score for r in pool)
    ties = [r for r in pool if r.score >= best - 1e-12]
    return min(ties, key=lambda r: (tuple(ParameterVector.from_unconstrained(spec, r.u).natural()),
                                    r.start))


def _maximize(spec, y, rule, starts, gtol, maxiter, gradient):
    obj = _Objective(spec, y, rule, gradient)
    logit_idx = logit_coordinates(spec)
    runs = [_run_start(obj, np.asarray(u0, float), gtol, maxiter, i, logit_idx)
            for i, u0 in enumerate(starts)]
    return _pick_best(runs, spec), runs


def _box(spec: CombinationSpec, y) -> np.ndarray:
    parts = []
    if spec.d_eta:
        parts.append(np.tile([math.log(0.1 / 0.9), math.log(0.9 / 0.1)], (spec.d_eta, 1)))
    parts += [m.start_box(y) for m in spec.constituents]
    return np.vstack(parts)


def _finalize(spec, run: _Run, obj_rule, y, mode, starts_used, message="", stages=(),
              iterations=None, converged=None, gnorm=None):
    """Snap saturated weights onto the simplex boundary and recompute the score."""
    u = run.u
    boundary = []
    names = spec.param_names()
    for i in logit_coordinates(spec):
        if abs(u[i]) > BOUNDARY_LOGIT:
            boundary.append(names[i])
    theta = ParameterVector.from_unconstrained(spec, u)
    if spec.K == 2 and abs(u[0]) > BOUNDARY_LOGIT:
        theta = theta.with_weights(WeightVector.pair(1.0 if u[0] > 0 else 0.0))
    score = in_sample_score(theta, y, obj_rule)
    return EstimationResult(
        estimate=theta, achieved_score=score,
        converged=run.converged if converged is None else converged,
        iterations=run.iterations if iterations is None else iterations,
        gradient_norm=run.gnorm if gnorm is None else gnorm,
        starts_used=starts_used, mode=mode, rule=obj_rule, n_obs=int(y.size),
        boundary=tuple(boundary), message=message or run.message, stages=tuple(stages))


def in_sample_score(theta: ParameterVector, series, rule: ScoringRule) -> float:
    """Average score over indices 1..n-1 (index 0 has no lag to condition on)."""
    y = series.values if isinstance(series, ObservedSeries) else np.asarray(series, dtype=float)
    with np.errstate(divide="ignore"):
        vals = pool_terms(theta.models, theta.natural(), y[:-1], y[1:], rule)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# public estimators


def estimate_constituent(model_id, series, rule: ScoringRule, *, n_starts: int = N_STARTS,
                         seed: int = 0, gtol: float = GTOL, maxiter: int = MAXITER,
                         gradient: str = "analytic"):
    """Maximise one constituent's in-sample average score.

    Returns ``(params, result)``; ``params`` is the model's parameter record
    (``Ar1Params`` or ``Arch1Params``).
    """
    y = _values(series)
    spec = CombinationSpec((model_id,))
    model = spec.constituents[0]
    starts = _latin_starts(_box(spec, y), n_starts, derive_seed(seed, "starts", model.name))
    best, runs = _maximize(spec, y, rule, starts, gtol, maxiter, gradient)
    if not any(r.converged for r in runs):
        diag = [{"start": r.start, "score": r.score, "gradient_norm": r.gnorm,
                 "message": r.message} for r in runs]
        raise EstimationError(f"no start converged for {model.name}", stage=model.name,
                              diagnostics=diag)
    result = _finalize(spec, best, rule, y, "constituent", len(runs))
    return result.estimate.constituent_params()[0], result


def _stage_two_pair(a1, a2):
    """argmax over eta in [0, 1] of mean log(eta e^a1 + (1 - eta) e^a2).

    The criterion is concave in eta (a log of an affine function), so the
    boundary is optimal exactly when the derivative there points outward;
    otherwise the derivative has a single interior root.
    """
    diff = np.clip(a2 - a1, -700.0, 700.0)
    with np.errstate(over="ignore"):
        if np.mean(1.0 - np.exp(diff)) >= 0.0:
            return 1.0, 0.0
        if np.mean(np.exp(-diff) - 1.0) <= 0.0:
            return 0.0, 0.0
    r = np.exp(-diff)  # f1 / f2

    def deriv(eta):
        return float(np.mean((r - 1.0) / (eta * r + (1.0 - eta))))

    eta = optimize.brentq(deriv, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                          maxiter=500)
    return eta, abs(deriv(eta)) * eta * (1.0 - eta)


def _stage_one(spec, series, rule, n_starts, seed, gtol, maxiter, gradient):
    stage_results = []
    for m in spec.constituents:
        try:
            _, res = estimate_constituent(m, series, rule, n_starts=n_starts, seed=seed,
                                          gtol=gtol, maxiter=maxiter, gradient=gradient)
        except EstimationError as err:
            raise EstimationError(str(err), stage=f"stage1:{m.name}",
                                  diagnostics=err.diagnostics) from None
        stage_results.append(res)
    return stage_results


def estimate_two_stage(series, rule: ScoringRule, *, spec: CombinationSpec = DEFAULT_SPEC,
                       n_starts: int = N_STARTS, seed: int = 0, gtol: float = GTOL,
                       maxiter: int = MAXITER, gradient: str = "analytic") -> EstimationResult:
    """Constituents first, then the pool weight with constituents held fixed."""
    y = _values(series)
    stages = _stage_one(spec, y, rule, n_starts, seed, gtol, maxiter, gradient)
    gammas = [s.estimate.gammas[0] for s in stages]
    a = [constituent_terms(m, g, y[:-1], y[1:], rule) for m, g in zip(spec.constituents, gammas)]
    if spec.K == 2:
        eta, gnorm = _stage_two_pair(a[0], a[1])
        weights = WeightVector.pair(eta)
        iters = 0
        boundary_w = eta in (0.0, 1.0)
    else:
        weights, gnorm, iters, boundary_w = _stage_two_general(np.stack(a), gtol, maxiter)
    theta = ParameterVector(spec, weights, tuple(gammas))
    boundary = tuple(b for s in stages for b in s.boundary)
    if boundary_w:
        boundary = (spec.param_names()[0],) + boundary
    return EstimationResult(
        estimate=theta, achieved_score=in_sample_score(theta, y, rule),
        converged=all(s.converged for s in stages) and gnorm <= gtol,
        iterations=sum(s.iterations for s in stages) + iters,
        gradient_norm=max([gnorm] + [s.gradient_norm for s in stages]),
        starts_used=sum(s.starts_used for s in stages), mode="two_stage", rule=rule,
        n_obs=int(y.size), boundary=boundary, stages=tuple(stages))


def _stage_two_general(a: np.ndarray, gtol, maxiter):
    K = a.shape[0]

    def fun(u):
        w = np.append(_eta_to_natural(u), 0.0)
        w[-1] = 1.0 - w[:-1].sum()
        with np.errstate(divide="ignore"):
            lw = np.log(np.clip(w, 0.0, None))
        weighted = a + lw[:, None]
        top = weighted.max(axis=0)
        total = top + np.log(np.exp(weighted - top).sum(axis=0))
        rel = np.exp(a - total)
        g_nat = (rel[:-1] - rel[-1]).mean(axis=1)
        return -float(total.mean()), -_eta_jacobian(u).T @ g_nat

    res = optimize.minimize(fun, np.zeros(K - 1), jac=True, method="BFGS",
                            options={"gtol": gtol, "maxiter": maxiter})
    w = WeightVector.from_free(_eta_to_natural(res.x))
    gnorm = float(np.max(np.abs(fun(res.x)[1])))
    return w, gnorm, int(res.nit), bool(np.any(np.abs(res.x) > BOUNDARY_LOGIT))


def estimate_two_stage_fixed_weight(series, rule: ScoringRule, eta_star, *,
                                    spec: CombinationSpec = DEFAULT_SPEC,
                                    n_starts: int = N_STARTS, seed: int = 0,
                                    gtol: float = GTOL, maxiter: int = MAXITER,
                                    gradient: str = "analytic") -> EstimationResult:
    """Stage one as usual; the pool weight is set to ``eta_star``, not estimated."""
    if not isinstance(eta_star, WeightVector):
        eta_star = WeightVector.pair(float(eta_star))
    if eta_star.K != spec.K:
        raise ValueError("eta_star does not match the number of constituents")
    y = _values(series)
    stages = _stage_one(spec, y, rule, n_starts, seed, gtol, maxiter, gradient)
    theta = ParameterVector(spec, eta_star, tuple(s.estimate.gammas[0] for s in stages))
    return EstimationResult(
        estimate=theta, achieved_score=in_sample_score(theta, y, rule),
        converged=all(s.converged for s in stages),
        iterations=sum(s.iterations for s in stages),
        gradient_norm=max(s.gradient_norm for s in stages),
        starts_used=sum(s.starts_used for s in stages), mode="two_stage_fixed_weight",
        rule=rule, n_obs=int(y.size), boundary=tuple(b for s in stages for b in s.boundary),
        stages=tuple(stages))


def _warm_start(theta: ParameterVector) -> np.ndarray:
    spec = theta.spec
    free = np.clip(theta.weights.free(), 1e-3, None)
    if free.sum() > 1 - 1e-3:
        free = free * (1 - 1e-3) / free.sum()
    theta = theta.with_weights(WeightVector.from_free(free))
    u = theta.to_unconstrained()
    idx = logit_coordinates(spec)
    u[idx] = np.clip(u[idx], -BOUNDARY_LOGIT + 2, BOUNDARY_LOGIT - 2)
    return u


def estimate_one_stage(series, rule: ScoringRule, init: ParameterVector | None = None, *,
                       spec: CombinationSpec = DEFAULT_SPEC, n_starts: int = N_STARTS,
                       seed: int = 0, gtol: float = GTOL, maxiter: int = MAXITER,
                       gradient: str = "analytic", warm_start: bool = True) -> EstimationResult:
    """Joint maximisation over the weights and all constituent parameters.

    Starts are ``n_starts`` Latin-hypercube points plus a warm start at
    ``init`` (by default the two-stage solution).
    """
    y = _values(series)
    if init is not None:
        spec = init.spec
    starts = list(_latin_starts(_box(spec, y), n_starts, derive_seed(seed, "starts", "pool")))
    two_stage = None
    if init is None and warm_start:
        try:
            two_stage = estimate_two_stage(y, rule, spec=spec, n_starts=n_starts, seed=seed,
                                           gtol=gtol, maxiter=maxiter, gradient=gradient)
            init = two_stage.estimate
        except EstimationError as err:
            log.warning("two-stage warm start unavailable: %s", err)
    if init is not None:
        starts.append(_warm_start(init))
    if not starts:
        raise ValueError("no starting values")
    best, runs = _maximize(spec, y, rule, starts, gtol, maxiter, gradient)
    return _finalize(spec, best, rule, y, "one_stage", len(runs))


def estimate(mode: str, series, rule: ScoringRule, *, eta_star=None, **kwargs) -> EstimationResult:
    if mode == "one_stage":
        return estimate_one_stage(series, rule, **kwargs)
    if mode == "two_stage":
        return estimate_two_stage(series, rule, **kwargs)
    if mode == "two_stage_fixed_weight":
        if eta_star is None:
            raise ValueError("fixed-weight mode needs eta_star")
        return estimate_two_stage_fixed_weight(series, rule, eta_star, **kwargs)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# large-sample reference optima


def reference_path(dgp: DgpParams, n_large: int, seed: int) -> np.ndarray:
    return simulate_dgp_path(dgp, n_large, stream(seed, "reference-path")).y


def compute_reference_optima(rule: ScoringRule, dgp: DgpParams, n_large: int, seed: int, *,
                             spec: CombinationSpec = DEFAULT_SPEC, cache_dir=None,
                             n_starts: int = N_STARTS, y: np.ndarray | None = None):
    """Two-stage (theta*) and one-stage (theta0) optima on one long DGP path.

    Results are cached under a content hash of ``(rule, dgp, n_large, seed,
    spec, n_starts)``.
    """
    if n_large < 100_000:
        raise ValueError("n_large must be at least 1e5")
    key = cache.content_key("reference", rule.to_dict(), dgp.to_dict(), n_large, seed,
                            spec.to_dict(), n_starts)
    name = f"reference-{key}.json"
    hit = cache.load(cache_dir, name)
    if hit is not None:
        log.info("reference optima cache hit %s", name)
        return (ReferenceOptimum.from_dict(hit["theta_star"]),
                ReferenceOptimum.from_dict(hit["theta_zero"]))
    if y is None:
        y = reference_path(dgp, n_large, seed)
    two = estimate_two_stage(y, rule, spec=spec, n_starts=n_starts, seed=seed)
    one = estimate_one_stage(y, rule, init=two.estimate, spec=spec, n_starts=n_starts, seed=seed)
    star = ReferenceOptimum(two.estimate, n_large, rule, "two_stage", two.achieved_score, seed)
    zero = ReferenceOptimum(one.estimate, n_large, rule, "one_stage", one.achieved_score, seed)
    cache.store(cache_dir, name, {"key": key, "theta_star": star.to_dict(),
                                  "theta_zero": zero.to_dict(),
                                  "diagnostics": {"two_stage": two.to_dict(),
                                                  "one_stage": one.to_dict()}})
    return star, zero


def with_fixed_weight(result: EstimationResult, series, eta_star) -> EstimationResult:
    """Fixed-weight variant built from an existing two-stage fit (same stage one)."""
    if result.mode != "two_stage":
        raise ValueError("needs a two-stage result")
    if not isinstance(eta_star, WeightVector):
        eta_star = WeightVector.pair(float(eta_star))
    y = _values(series)
    theta = result.estimate.with_weights(eta_star)
    stages = result.stages
    return EstimationResult(
        estimate=theta, achieved_score=in_sample_score(theta, y, result.rule),
        converged=all(s.converged for s in stages), iterations=sum(s.iterations for s in stages),
        gradient_norm=max(s.gradient_norm for s in stages),
        starts_used=sum(s.starts_used for s in stages), mode="two_stage_fixed_weight",
        rule=result.rule, n_obs=int(y.size),
        boundary=tuple(b for s in stages for b in s.boundary), stages=stages)
