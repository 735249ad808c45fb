"""Linear opinion pool of Gaussian constituent predictives.

The engine functions at the bottom return per-observation scores and, on
request, their gradients with respect to the natural parameter vector
``[eta_1 .. eta_{K-1}, gamma_1, .., gamma_K]``.  The last weight is implied
by the simplex constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ConstituentModel, Gaussian, Mixture, get_model
from .scoring import ScoringRule, gaussian_score_terms


@dataclass(frozen=True)
class WeightVector:
    """Pool weights on the simplex, stored in full (K entries)."""

    eta: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must lie on the simplex")
        object.__setattr__(self, "eta", tuple(float(x) for x in w))

    @property
    def K(self) -> int:
        return len(self.eta)

    def as_array(self) -> np.ndarray:
        return np.array(self.eta)

    def free(self) -> np.ndarray:
        """The K-1 free weights (for K=2, the AR weight eta)."""
        return np.array(self.eta[:-1])

    @classmethod
    def pair(cls, eta: float) -> "WeightVector":
        if not 0 <= eta <= 1:
            raise ValueError("weight must lie in [0, 1]")
        return cls((float(eta), 1.0 - float(eta)))

    @classmethod
    def from_free(cls, free) -> "WeightVector":
        free = np.atleast_1d(np.asarray(free, dtype=float))
        return cls(tuple(free) + (1.0 - float(free.sum()),))


@dataclass(frozen=True)
class CombinationSpec:
    constituents: tuple = field(default_factory=lambda: ("ar1", "arch1"))
    weights: WeightVector | None = None

    def __post_init__(self):
        models = tuple(get_model(m) for m in self.constituents)
        if len(models) < 1:
            raise ValueError("need at least one constituent")
        object.__setattr__(self, "constituents", models)
        if self.weights is not None and self.weights.K != len(models):
            raise ValueError("weights length does not match constituents")

    @property
    def K(self) -> int:
        return len(self.constituents)

    @property
    def d_eta(self) -> int:
        return self.K - 1

    @property
    def dim(self) -> int:
        return self.d_eta + sum(m.dim for m in self.constituents)

    def param_names(self) -> list[str]:
        names = [f"eta_{m.name}" for m in self.constituents[:-1]]
        for m in self.constituents:
            names += [f"{m.name}.{p}" for p in m.param_names]
        return names

    def to_dict(self) -> dict:
        d = {"constituents": [m.name for m in self.constituents]}
        if self.weights is not None:
            d["weights"] = list(self.weights.eta)
        return d


DEFAULT_SPEC = CombinationSpec()


def pool_predictive(spec: CombinationSpec, constituent_params, y_prev) -> Mixture:
    weights = spec.weights if spec.weights is not None else WeightVector((1.0 / spec.K,) * spec.K)
    comps = []
    for model, p in zip(spec.constituents, constituent_params):
        nat = p.natural() if hasattr(p, "natural") else np.asarray(p, dtype=float)
        comps.append(model.predictive(nat, y_prev))
    return Mixture(weights.eta, tuple(comps))


def pool_log_density(spec: CombinationSpec, constituent_params, y_prev, y):
    """log of the weighted sum of component densities, via log-sum-exp."""
    return pool_predictive(spec, constituent_params, y_prev).logpdf(y)


# ---------------------------------------------------------------------------
# vectorised engine


def split_natural(models, theta) -> tuple[np.ndarray, list[np.ndarray]]:
    """Split a flat natural vector into full weights and per-model blocks."""
    theta = np.asarray(theta, dtype=float)
    K = len(models)
    free = theta[:K - 1]
    weights = np.append(free, 1.0 - free.sum())
    blocks, pos = [], K - 1
    for m in models:
        blocks.append(theta[pos:pos + m.dim])
        pos += m.dim
    return weights, blocks


def constituent_terms(model: ConstituentModel, p, y_prev, y, rule: ScoringRule,
                      grad: bool = False):
    """Per-observation score of one constituent, and its (n, dim) gradient."""
    if not grad:
        mean, sd = model.moments(p, y_prev)
        return gaussian_score_terms(rule, y, mean, sd)
    mean, sd, dmean, dsd = model.moments(p, y_prev, grad=True)
    val, a_mean, a_sd = gaussian_score_terms(rule, y, mean, sd, grad=True)
    return val, (a_mean * dmean + a_sd * dsd).T


def pool_terms(models, theta, y_prev, y, rule: ScoringRule, grad: bool = False):
    """Per-observation pool score and its (n, d) natural-parameter gradient."""
    weights, blocks = split_natural(models, theta)
    if len(models) == 1:
        return constituent_terms(models[0], blocks[0], y_prev, y, rule, grad)
    with np.errstate(divide="ignore"):
        logw = np.log(np.clip(weights, 0.0, None))
    vals, dblocks = [], []
    for model, p in zip(models, blocks):
        if grad:
            v, d = constituent_terms(model, p, y_prev, y, rule, grad=True)
            dblocks.append(d)
        else:
            v = constituent_terms(model, p, y_prev, y, rule)
        vals.append(v)
    a = np.stack(vals)
    weighted = a + logw[:, None]
    top = weighted.max(axis=0)
    total = top + np.log(np.exp(weighted - top).sum(axis=0))
    if not grad:
        return total
    rel = np.exp(a - total)          # component density / mixture density
    resp = rel * weights[:, None]    # posterior responsibilities
    cols = [rel[k] - rel[-1] for k in range(len(models) - 1)]
    cols = [c[:, None] for c in cols]
    for k, d in enumerate(dblocks):
        cols.append(resp[k][:, None] * d)
    return total, np.concatenate(cols, axis=1)


def pool_density_function(models, theta):
    """Callable ``y_prev -> Mixture`` for use with ``scoring.average_score``."""
    weights, blocks = split_natural(models, theta)

    def predictive(y_prev):
        comps = tuple(m.predictive(p, y_prev) for m, p in zip(models, blocks))
        if len(comps) == 1:
            return comps[0]
        return Mixture(tuple(weights), comps)

    return predictive


def constituent_density_function(model, p):
    def predictive(y_prev) -> Gaussian:
        return model.predictive(np.asarray(p, dtype=float), y_prev)

    return predictive
