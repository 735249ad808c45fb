"""Constituent predictive models, predictive distributions and the censored AR-ARCH DGP.

Two kinds of API live here.  The small value types (``Gaussian``,
``Mixture``, ``CensoredGaussian``) and the ``*_predictive`` helpers describe a
single one-step-ahead distribution and are what the scoring rules consume.
The ``Ar1Model`` / ``Arch1Model`` classes are the vectorised side used by the
estimators: they map a natural parameter vector and an array of lagged values
to predictive means and standard deviations together with their derivatives,
and carry the smooth bijection onto an unconstrained space.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .rng import stream
from .series import ObservedSeries

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def norm_logpdf(z):
    return -0.5 * np.square(z) - LOG_SQRT_2PI


def norm_logcdf(z):
    return special.log_ndtr(z)


def norm_logsf(z):
    return special.log_ndtr(-np.asarray(z, dtype=float))


def expit(u):
    return special.expit(u)


def logit(p):
    return special.logit(p)


# ---------------------------------------------------------------------------
# parameter types


@dataclass(frozen=True)
class Ar1Params:
    alpha0: float
    alpha1: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("AR(1) sigma must be positive")
        if not abs(self.alpha1) < 1:
            raise ValueError("AR(1) coefficient must lie in (-1, 1)")

    def natural(self) -> np.ndarray:
        return np.array([self.alpha0, self.alpha1, self.sigma ** 2])


@dataclass(frozen=True)
class Arch1Params:
    mu: float
    beta0: float
    beta1: float

    def __post_init__(self):
        if not self.beta0 > 0:
            raise ValueError("ARCH constant must be positive")
        if not 0 <= self.beta1 < 1:
            raise ValueError("ARCH coefficient must lie in [0, 1)")

    def natural(self) -> np.ndarray:
        return np.array([self.mu, self.beta0, self.beta1])


@dataclass(frozen=True)
class DgpParams:
    """Censored AR(1)-ARCH(1) data generating process."""

    ar: float = 0.5
    arch_const: float = 0.2
    arch_coef: float = 0.75
    censor_bound: float = 5.0
    burn_in: int = 1000

    def __post_init__(self):
        if not self.censor_bound > 0:
            raise ValueError("censor_bound must be positive")
        if not 0 <= self.arch_coef < 1:
            raise ValueError("arch_coef must lie in [0, 1)")
        if not self.arch_const > 0:
            raise ValueError("arch_const must be positive")
        if int(self.burn_in) < 0:
            raise ValueError("burn_in must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# predictive distributions


@dataclass(frozen=True)
class Gaussian:
    mean: float
    sd: float
    kind = "gaussian"

    def __post_init__(self):
        if not np.all(np.asarray(self.sd) > 0):
            raise ValueError("sd must be positive")

    def _z(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.sd

    def cdf(self, y):
        return special.ndtr(self._z(y))

    def sf(self, y):
        return special.ndtr(-self._z(y))

    def logpdf(self, y):
        return norm_logpdf(self._z(y)) - np.log(self.sd)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def logsf(self, b):
        return norm_logsf(self._z(b))


@dataclass(frozen=True)
class Mixture:
    """Finite mixture of Gaussians with weights on the simplex."""

    weights: tuple
    components: tuple
    kind = "mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.components) != w.size or w.size < 1:
            raise ValueError("weights and components differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "components", tuple(self.components))

    def _logw(self):
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.weights))

    def _combine(self, terms):
        logw = self._logw()
        stacked = np.stack([lw + t for lw, t in zip(logw, terms)])
        return special.logsumexp(stacked, axis=0)

    def cdf(self, y):
        return sum(w * c.cdf(y) for w, c in zip(self.weights, self.components))

    def sf(self, y):
        return sum(w * c.sf(y) for w, c in zip(self.weights, self.components))

    def logpdf(self, y):
        return self._combine([c.logpdf(y) for c in self.components])

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def logsf(self, b):
        return self._combine([c.logsf(b) for c in self.components])


@dataclass(frozen=True)
class CensoredGaussian:
    """Gaussian clamped to ``[lower, upper]``; tail mass sits on atoms at the bounds.

    ``logpdf`` is the generalised density: the Gaussian density inside the
    interval and the log atom mass at a bound.
    """

    mean: float
    sd: float
    lower: float
    upper: float
    kind = "censored_gaussian"

    def __post_init__(self):
        if not np.all(np.asarray(self.sd) > 0):
            raise ValueError("sd must be positive")
        if not self.lower < self.upper:
            raise ValueError("lower must be below upper")

    def _z(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.sd

    def atom_masses(self):
        return (special.ndtr((self.lower - self.mean) / self.sd),
                special.ndtr(-(self.upper - self.mean) / self.sd))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        inner = special.ndtr(self._z(y))
        return np.where(y < self.lower, 0.0, np.where(y >= self.upper, 1.0, inner))

    def sf(self, y):
        y = np.asarray(y, dtype=float)
        inner = special.ndtr(-self._z(y))
        return np.where(y < self.lower, 1.0, np.where(y >= self.upper, 0.0, inner))

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        z = self._z(y)
        out = norm_logpdf(z) - np.log(self.sd)
        zl = (self.lower - self.mean) / self.sd
        zu = (self.upper - self.mean) / self.sd
        out = np.where(y == self.lower, norm_logcdf(zl), out)
        out = np.where(y == self.upper, norm_logsf(zu), out)
        return np.where((y < self.lower) | (y > self.upper), -np.inf, out)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def logsf(self, b):
        b = np.asarray(b, dtype=float)
        out = norm_logsf(self._z(b))
        out = np.where(b < self.lower, 0.0, out)
        return np.where(b >= self.upper, -np.inf, out)


PredictiveDistribution = Gaussian | Mixture | CensoredGaussian


def ar1_predictive(params: Ar1Params, y_prev) -> Gaussian:
    return Gaussian(params.alpha0 + params.alpha1 * y_prev, params.sigma)


def arch1_predictive(params: Arch1Params, y_prev) -> Gaussian:
    var = params.beta0 + params.beta1 * np.square(y_prev - params.mu)
    return Gaussian(params.mu, np.sqrt(var))


def dgp_predictive(params: DgpParams, x_prev, v_prev_sq, z_prev) -> CensoredGaussian:
    """True one-step predictive of the censored DGP given the latent state at t-1."""
    if not np.all(np.asarray(v_prev_sq) > 0):
        raise ValueError("v_prev_sq must be positive")
    var = params.arch_const + params.arch_coef * v_prev_sq * np.square(z_prev)
    bound = params.censor_bound
    return CensoredGaussian(params.ar * x_prev, np.sqrt(var), -bound, bound)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class DgpPath:
    """Observed values with the latent state needed for the true predictive."""

    y: np.ndarray
    x: np.ndarray
    v2: np.ndarray
    z: np.ndarray
    x_init: float
    v2_init: float
    z_init: float

    def predictive(self, params: DgpParams) -> CensoredGaussian:
        """Vectorised true predictives for y[0], ..., y[-1]."""
        x_prev = np.concatenate(([self.x_init], self.x[:-1]))
        v2_prev = np.concatenate(([self.v2_init], self.v2[:-1]))
        z_prev = np.concatenate(([self.z_init], self.z[:-1]))
        return dgp_predictive(params, x_prev, v2_prev, z_prev)


def simulate_dgp_path(params: DgpParams, n: int, rng: np.random.Generator) -> DgpPath:
    if n < 1:
        raise ValueError("n must be at least 1")
    burn = int(params.burn_in)
    total = burn + n
    draws = rng.standard_normal(total + 1).tolist()
    a, b, phi = params.arch_const, params.arch_coef, params.ar
    xs = [0.0] * total
    vs = [0.0] * total
    x = 0.0
    v2 = a / (1.0 - b)
    zp = draws[0]
    sqrt = math.sqrt
    for i in range(total):
        v2 = a + b * v2 * zp * zp
        zi = draws[i + 1]
        x = phi * x + sqrt(v2) * zi
        xs[i] = x
        vs[i] = v2
        zp = zi
    x_arr = np.array(xs)
    v_arr = np.array(vs)
    z_arr = np.array(draws[1:])
    if burn > 0:
        x_init, v_init, z_init = x_arr[burn - 1], v_arr[burn - 1], z_arr[burn - 1]
    else:
        x_init, v_init, z_init = 0.0, a / (1.0 - b), draws[0]
    bound = params.censor_bound
    x_arr, v_arr, z_arr = x_arr[burn:], v_arr[burn:], z_arr[burn:]
    return DgpPath(np.clip(x_arr, -bound, bound), x_arr, v_arr, z_arr,
                   float(x_init), float(v_init), float(z_init))


def simulate_dgp(params: DgpParams, n: int, rng: np.random.Generator) -> ObservedSeries:
    """``n`` draws of the censored DGP after discarding ``burn_in`` values."""
    return ObservedSeries(simulate_dgp_path(params, n, rng).y)


def stationary_quantile(params: DgpParams, p: float, n_draws: int, seed: int,
                        cache_dir: str | Path | None = None) -> float:
    """Empirical ``p``-quantile of ``n_draws`` simulated values.

    With ``cache_dir`` the value is persisted as ``{p, n_draws, seed, value}``
    JSON (plus the DGP it was drawn from) and reused on later calls.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if n_draws < 100_000:
        raise ValueError("n_draws must be at least 1e5")
    path = None
    if cache_dir is not None:
        from .cache import content_key

        key = content_key("quantile", params.to_dict(), p, n_draws, seed)
        path = Path(cache_dir) / f"quantile-{key}.json"
        if path.exists():
            return float(json.loads(path.read_text())["value"])
    y = simulate_dgp_path(params, n_draws, stream(seed, "stationary-quantile")).y
    value = float(np.quantile(y, p))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"p": p, "n_draws": n_draws, "seed": seed, "value": value,
                  "dgp": params.to_dict()}
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return value


# ---------------------------------------------------------------------------
# vectorised constituent models used by the estimators


class ConstituentModel:
    """Gaussian location-scale predictive indexed by a natural parameter vector.

    Subclasses define ``moments`` (mean, sd and their derivatives w.r.t. the
    natural parameters) and the elementwise transform to unconstrained space.
    """

    name: str = ""
    param_names: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.param_names)

    def moments(self, p, y_prev, grad=False):
        raise NotImplementedError

    def to_natural(self, u):
        raise NotImplementedError

    def to_unconstrained(self, p):
        raise NotImplementedError

    def dnatural(self, u):
        """Diagonal of d(natural)/d(unconstrained) at ``u``."""
        raise NotImplementedError

    def logit_coords(self) -> tuple[int, ...]:
        """Coordinates whose transform saturates at a boundary."""
        return ()

    def is_valid(self, p) -> bool:
        raise NotImplementedError

    def start_box(self, y: np.ndarray) -> np.ndarray:
        """(dim, 2) box in unconstrained space for multi-start sampling."""
        raise NotImplementedError

    def params(self, p):
        raise NotImplementedError

    def predictive(self, p, y_prev) -> Gaussian:
        mean, sd = self.moments(np.asarray(p, dtype=float), y_prev)[:2]
        return Gaussian(mean, sd)

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self).__name__)


class Ar1Model(ConstituentModel):
    """Gaussian AR(1); natural parameters ``(alpha0, alpha1, sigma2)``."""

    name = "ar1"
    param_names = ("alpha0", "alpha1", "sigma2")

    def moments(self, p, y_prev, grad=False):
        y_prev = np.asarray(y_prev, dtype=float)
        mean = p[0] + p[1] * y_prev
        sd = math.sqrt(p[2]) * np.ones_like(mean)
        if not grad:
            return mean, sd
        ones = np.ones_like(mean)
        zeros = np.zeros_like(mean)
        dmean = np.stack([ones, y_prev, zeros])
        dsd = np.stack([zeros, zeros, ones / (2.0 * sd)])
        return mean, sd, dmean, dsd

    def to_natural(self, u):
        return np.array([u[0], 2.0 * expit(u[1]) - 1.0, math.exp(u[2])])

    def to_unconstrained(self, p):
        return np.array([p[0], logit(0.5 * (p[1] + 1.0)), math.log(p[2])])

    def dnatural(self, u):
        s = expit(u[1])
        return np.array([1.0, 2.0 * s * (1.0 - s), math.exp(u[2])])

    def logit_coords(self):
        return (1,)

    def is_valid(self, p):
        return bool(p[2] > 0 and abs(p[1]) < 1)

    def start_box(self, y):
        m, s2 = float(np.mean(y)), float(np.var(y))
        s = math.sqrt(s2) if s2 > 0 else 1.0
        s2 = s2 if s2 > 0 else 1.0
        return np.array([
            [m - 0.5 * s, m + 0.5 * s],
            [logit(0.5 * (1 - 0.8)), logit(0.5 * (1 + 0.8))],
            [math.log(0.5 * s2), math.log(1.5 * s2)],
        ])

    def params(self, p):
        return Ar1Params(float(p[0]), float(p[1]), math.sqrt(p[2]))


class Arch1Model(ConstituentModel):
    """Constant-mean Gaussian ARCH(1); natural parameters ``(mu, beta0, beta1)``."""

    name = "arch1"
    param_names = ("mu", "beta0", "beta1")

    def moments(self, p, y_prev, grad=False):
        y_prev = np.asarray(y_prev, dtype=float)
        dev = y_prev - p[0]
        var = p[1] + p[2] * dev * dev
        sd = np.sqrt(var)
        mean = np.full_like(sd, p[0])
        if not grad:
            return mean, sd
        ones = np.ones_like(sd)
        zeros = np.zeros_like(sd)
        dmean = np.stack([ones, zeros, zeros])
        half_inv = 0.5 / sd
        dsd = np.stack([-2.0 * p[2] * dev * half_inv, half_inv, dev * dev * half_inv])
        return mean, sd, dmean, dsd

    def to_natural(self, u):
        return np.array([u[0], math.exp(u[1]), expit(u[2])])

    def to_unconstrained(self, p):
        return np.array([p[0], math.log(p[1]), logit(p[2])])

    def dnatural(self, u):
        s = expit(u[2])
        return np.array([1.0, math.exp(u[1]), s * (1.0 - s)])

    def logit_coords(self):
        return (2,)

    def is_valid(self, p):
        return bool(p[1] > 0 and 0 <= p[2] < 1)

    def start_box(self, y):
        m, s2 = float(np.mean(y)), float(np.var(y))
        s = math.sqrt(s2) if s2 > 0 else 1.0
        s2 = s2 if s2 > 0 else 1.0
        return np.array([
            [m - 0.5 * s, m + 0.5 * s],
            [math.log(0.2 * s2), math.log(1.0 * s2)],
            [logit(0.05), logit(0.8)],
        ])

    def params(self, p):
        return Arch1Params(float(p[0]), float(p[1]), float(p[2]))


MODELS = {"ar1": Ar1Model, "arch1": Arch1Model}


def get_model(model_id) -> ConstituentModel:
    if isinstance(model_id, ConstituentModel):
        return model_id
    try:
        return MODELS[str(model_id).lower()]()
    except KeyError:
        raise ValueError(f"unknown constituent model {model_id!r}") from None
