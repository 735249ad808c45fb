"""Log score and region-censored log score (positively oriented)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import DgpParams, norm_logpdf, norm_logsf, stationary_quantile
from .series import ObservedSeries


class ScoringError(ArithmeticError):
    """A score of -inf (zero generalised density or zero tail mass)."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        if index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)


@dataclass(frozen=True)
class ScoringRule:
    """``kind`` is ``"ls"`` or ``"cs"``; a censored rule rewards density on
    ``B = (-inf, threshold]`` and only the tail mass of ``B``'s complement."""

    kind: str = "ls"
    threshold: float | None = None
    p: float | None = None

    def __post_init__(self):
        if self.kind not in ("ls", "cs"):
            raise ValueError(f"unknown scoring rule {self.kind!r}")
        if self.kind == "cs":
            if self.threshold is None or not math.isfinite(self.threshold):
                raise ValueError("censored rule needs a finite threshold")

    @property
    def id(self) -> str:
        if self.kind == "ls":
            return "ls"
        if self.p is not None:
            return f"cs{round(100 * self.p):g}"
        return f"cs@{self.threshold:.6g}"

    def to_dict(self) -> dict:
        if self.kind == "ls":
            return {"type": "ls"}
        return {"type": "cs", "p": self.p, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringRule":
        kind = d.get("type", d.get("kind"))
        if kind == "ls":
            return cls("ls")
        return cls("cs", float(d["threshold"]), d.get("p"))


LOG_SCORE = ScoringRule("ls")


def censored_log_score(threshold: float, p: float | None = None) -> ScoringRule:
    return ScoringRule("cs", float(threshold), p)


def score(rule: ScoringRule, F, y):
    """Score of predictive ``F`` at realisation(s) ``y``.

    Works elementwise when ``F`` holds arrays.  Raises ``ScoringError`` on the
    first ``-inf`` instead of returning it.
    """
    y = np.asarray(y, dtype=float)
    if rule.kind == "ls":
        out = F.logpdf(y)
    else:
        inside = y <= rule.threshold
        out = np.where(inside, F.logpdf(y), F.logsf(rule.threshold))
    out = np.asarray(out, dtype=float)
    bad = np.flatnonzero(~(out > -np.inf))
    if bad.size:
        raise ScoringError("score is -inf", index=int(bad[0]) if out.ndim else None)
    return out[()] if out.ndim == 0 else out


def gaussian_score_terms(rule: ScoringRule, y, mean, sd, grad: bool = False):
    """Per-observation score of N(mean, sd) plus derivatives w.r.t. mean and sd."""
    z = (y - mean) / sd
    log_sd = np.log(sd)
    if rule.kind == "ls":
        val = norm_logpdf(z) - log_sd
        if not grad:
            return val
        return val, z / sd, (z * z - 1.0) / sd
    b = rule.threshold
    inside = y <= b
    zb = (b - mean) / sd
    log_tail = norm_logsf(zb)
    val = np.where(inside, norm_logpdf(z) - log_sd, log_tail)
    if not grad:
        return val
    hazard = np.exp(norm_logpdf(zb) - log_tail)
    d_mean = np.where(inside, z / sd, hazard / sd)
    d_sd = np.where(inside, (z * z - 1.0) / sd, hazard * zb / sd)
    return val, d_mean, d_sd


def _index_range(n: int, index_range) -> range:
    if index_range is None:
        return range(1, n)
    if isinstance(index_range, range):
        rng = index_range
    else:
        start, stop = index_range
        rng = range(int(start), int(stop))
    if rng.step != 1 or rng.start < 1 or rng.stop > n or len(rng) < 1:
        raise ValueError(f"index range {rng} invalid for a series of length {n}; "
                         "scoring needs one lag of conditioning")
    return rng


def per_point_scores(rule: ScoringRule, model, series, index_range=None) -> np.ndarray:
    y = series.values if isinstance(series, ObservedSeries) else np.asarray(series, float)
    rng = _index_range(y.size, index_range)
    idx = np.arange(rng.start, rng.stop)
    F = model(y[idx - 1])
    try:
        return np.asarray(score(rule, F, y[idx]), dtype=float).reshape(idx.size)
    except ScoringError as err:
        pos = None if err.index is None else int(idx[err.index])
        raise ScoringError("score is -inf", index=pos) from None


def average_score(rule: ScoringRule, model, series, index_range=None) -> float:
    """Mean score over ``index_range`` (0-based, default ``1..len-1``).

    ``model`` maps an array of lagged values to a (vectorised) predictive.
    Index 0 is never scored because its predictive needs the previous value.
    """
    return float(np.mean(per_point_scores(rule, model, series, index_range)))


def censor_region_from_quantile(p: float, quantile_source, **kwargs) -> ScoringRule:
    """Censored rule with threshold at the ``p``-quantile of ``quantile_source``.

    ``quantile_source`` may be a ``DgpParams`` (stationary quantile by
    simulation; pass ``n_draws``, ``seed`` and optionally ``cache_dir``), an
    observed series or array (empirical quantile), a number, or a callable
    taking ``p``.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if isinstance(quantile_source, DgpParams):
        b = stationary_quantile(quantile_source, p, kwargs.get("n_draws", 10_000_000),
                                kwargs.get("seed", 0), kwargs.get("cache_dir"))
    elif isinstance(quantile_source, ObservedSeries):
        b = float(np.quantile(quantile_source.values, p))
    elif callable(quantile_source):
        b = float(quantile_source(p))
    elif np.ndim(quantile_source) == 0:
        b = float(quantile_source)
    else:
        b = float(np.quantile(np.asarray(quantile_source, dtype=float), p))
    return censored_log_score(b, p)
