"""Out-of-sample evaluation, the Monte Carlo replication harness and the
parameter-uncertainty machinery (Gaussian draws, percentile intervals, KDE)."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import cache
from .estimate import (EstimationError, ParameterVector, compute_reference_optima,
                       estimate_one_stage, estimate_two_stage, with_fixed_weight)
from .models import DgpParams, simulate_dgp_path
from .pool import DEFAULT_SPEC, CombinationSpec, pool_terms
from .rng import derive_seed, stream
from .scoring import LOG_SCORE, ScoringError, ScoringRule, censored_log_score, score
from .series import ObservedSeries

log = logging.getLogger(__name__)

MODES = ("one_stage", "two_stage", "two_stage_fixed_weight")
MAX_FAILURE_RATE = 0.05
MAX_INVALID_RATE = 0.10


class HarnessError(RuntimeError):
    def __init__(self, message: str, details=None):
        self.details = details or {}
        super().__init__(message)


# ---------------------------------------------------------------------------
# holdout scoring


@dataclass(frozen=True, eq=False)
class HoldoutContext:
    """Holdout observations ``y`` and the value preceding each one."""

    y_prev: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        y_prev = np.asarray(self.y_prev, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y_prev.shape != y.shape or y.ndim != 1 or y.size < 1:
            raise ValueError("holdout needs matching 1-d arrays of at least one value")
        object.__setattr__(self, "y_prev", y_prev)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.size

    @classmethod
    def from_series(cls, series, start: int, stop: int | None = None) -> "HoldoutContext":
        """Holdout ``series[start:stop]`` conditioned on ``series[start-1:stop-1]``."""
        y = series.values if isinstance(series, ObservedSeries) else np.asarray(series, float)
        stop = y.size if stop is None else stop
        if start < 1 or stop > y.size or stop <= start:
            raise ValueError(f"holdout [{start}, {stop}) invalid for length {y.size}")
        return cls(y[start - 1:stop - 1], y[start:stop])


def _check_finite(vals, what="score"):
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ScoringError(f"{what} is -inf", index=int(bad[0]))


def out_of_sample_score(theta: ParameterVector, context: HoldoutContext,
                        rule: ScoringRule) -> float:
    """Average score of the pool at ``theta`` over the holdout."""
    with np.errstate(divide="ignore"):
        vals = pool_terms(theta.models, theta.natural(), context.y_prev, context.y, rule)
    _check_finite(vals)
    return float(np.mean(vals))


def dgp_scores(path, dgp: DgpParams, rule: ScoringRule, start: int = 0) -> np.ndarray:
    """Per-point scores of the true one-step predictives along a simulated path."""
    F = path.predictive(dgp)
    if start:
        F = type(F)(F.mean[start:], F.sd[start:], F.lower, F.upper)
    return np.asarray(score(rule, F, path.y[start:]), dtype=float)


def s_dgp(dgp: DgpParams, rule: ScoringRule, n_eval: int, seed: int, cache_dir=None) -> dict:
    """Average true-predictive score on a long path, with its standard error.

    The path is the same one used for the reference optima with equal
    ``(n_eval, seed)``.  Returns ``{"value", "se", ...}``.
    """
    if n_eval < 100_000:
        raise ValueError("n_eval must be at least 1e5")
    key = cache.content_key("sdgp", rule.to_dict(), dgp.to_dict(), n_eval, seed)
    name = f"sdgp-{key}.json"
    hit = cache.load(cache_dir, name)
    if hit is not None:
        log.info("S_DGP cache hit %s", name)
        return hit
    path = simulate_dgp_path(dgp, n_eval, stream(seed, "reference-path"))
    vals = dgp_scores(path, dgp, rule)
    record = {"rule": rule.to_dict(), "n_eval": n_eval, "seed": seed,
              "value": float(np.mean(vals)), "se": float(np.std(vals) / math.sqrt(vals.size))}
    cache.store(cache_dir, name, record)
    return record


# ---------------------------------------------------------------------------
# samples and summaries


@dataclass(frozen=True, eq=False)
class ScoreSampleSet:
    draws: np.ndarray
    source: str
    mode: str
    in_rule: str
    eval_rule: ScoringRule
    n: int
    point_estimate: float | None = None
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim != 1 or d.size < 2:
            raise ValueError("need at least two draws")
        if not np.all(np.isfinite(d)):
            raise ValueError("draws must be finite")
        if self.source not in ("monte_carlo_replication", "parameter_gaussian"):
            raise ValueError(f"unknown source {self.source!r}")
        object.__setattr__(self, "draws", d)
        if self.labels is None:
            object.__setattr__(self, "labels", np.arange(d.size))

    @property
    def estimator_id(self) -> tuple[str, str]:
        return self.mode, self.in_rule

    def __len__(self):
        return self.draws.size


@dataclass(frozen=True)
class DivergenceSummary:
    mean: float
    variance: float
    scaled_variance: float
    ci_mean: tuple
    ci_variance: tuple
    s_dgp: float | None
    expected_divergence: float | None
    count: int

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def summarize(sample, s_dgp_value: float | None = None, n: int | None = None,
              level: float = 0.95) -> DivergenceSummary:
    """Mean and variance of the draws with normal-approximation intervals.

    The variance is the plain sample second central moment; its standard
    error is ``sqrt((m4 - var^2) / M)``.
    """
    if isinstance(sample, ScoreSampleSet):
        x, n = sample.draws, sample.n if n is None else n
    else:
        x = np.asarray(sample, dtype=float)
    M = x.size
    if M < 2:
        raise ValueError("need at least two draws")
    if M < 30:
        log.warning("only %d draws; normal-approximation intervals are unreliable", M)
    z = stats.norm.ppf(0.5 + level / 2)
    mean = float(np.mean(x))
    dev = x - mean
    var = float(np.mean(dev ** 2))
    m4 = float(np.mean(dev ** 4))
    se_mean = math.sqrt(var / M)
    se_var = math.sqrt(max(m4 - var * var, 0.0) / M)
    div = None if s_dgp_value is None else s_dgp_value - mean
    return DivergenceSummary(
        mean=mean, variance=var, scaled_variance=(n or 1) * var,
        ci_mean=(mean - z * se_mean, mean + z * se_mean),
        ci_variance=(max(var - z * se_var, 0.0), var + z * se_var),
        s_dgp=s_dgp_value, expected_divergence=div, count=M)


def paired_difference(a: ScoreSampleSet, b: ScoreSampleSet, level: float = 0.95) -> dict:
    """Mean of ``a - b`` over replications present in both, with a normal CI."""
    common, ia, ib = np.intersect1d(a.labels, b.labels, return_indices=True)
    if common.size < 2:
        raise ValueError("too few shared replications")
    d = a.draws[ia] - b.draws[ib]
    z = stats.norm.ppf(0.5 + level / 2)
    m, se = float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))
    return {"mean": m, "se": se, "ci": (m - z * se, m + z * se), "count": int(d.size),
            "fraction_positive": float(np.mean(d >= 0))}


def percentile_ci(sample, level: float = 0.95) -> tuple[float, float]:
    """Efron percentile interval from order statistics.

    Uses 1-based ranks ``ceil(a/2 N)`` and ``ceil((1 - a/2) N)`` with
    ``a = 1 - level``; for ``N = 20000`` at 95% these are 500 and 19500.
    """
    x = np.sort(sample.draws if isinstance(sample, ScoreSampleSet) else np.asarray(sample, float))
    N = x.size
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    a = 1.0 - level
    # guard against 0.025 * 20000 evaluating to 500.0000000001
    lo = max(1, math.ceil(round(a / 2 * N, 9)))
    hi = max(1, min(N, math.ceil(round((1 - a / 2) * N, 9))))
    return float(x[lo - 1]), float(x[hi - 1])


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * x.size ** -0.2


def kde(sample, grid=None, n_grid: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Silverman's rule-of-thumb bandwidth.

    Returns ``(grid, density)``.  The default grid extends four bandwidths
    beyond the extreme draws.
    """
    x = sample.draws if isinstance(sample, ScoreSampleSet) else np.asarray(sample, float)
    if x.size < 10:
        raise ValueError("need at least 10 draws for a density estimate")
    h = silverman_bandwidth(x)
    if not h > 0:
        warnings.warn("draws have zero spread; density is a degenerate spike", RuntimeWarning)
        h = 1e-6 * max(1.0, abs(float(x[0])))
    if grid is None:
        grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_grid)
    grid = np.asarray(grid, dtype=float)
    if np.std(x) > 0:
        dens = stats.gaussian_kde(x, bw_method=h / np.std(x, ddof=1))(grid)
    else:
        dens = stats.norm.pdf((grid - x[0]) / h) / h
    return grid, dens


# ---------------------------------------------------------------------------
# parameter uncertainty


def _draw_ok(theta_vec, spec: CombinationSpec) -> bool:
    d = spec.d_eta
    free = theta_vec[:d]
    if d and (np.any(free < 0) or np.any(free > 1) or free.sum() > 1):
        return False
    pos = d
    for m in spec.constituents:
        if not m.is_valid(theta_vec[pos:pos + m.dim]):
            return False
        pos += m.dim
    return True


def gaussian_parameter_draws(theta_hat: ParameterVector, cov, n_draws: int,
                             rng: np.random.Generator, batch: int = 4096):
    """Draws from N(theta_hat, cov) with invalid draws rejected and redrawn.

    Returns ``(draws, n_rejected)``.  Raises ``HarnessError`` if more than
    10% of proposals fall outside the parameter space.
    """
    mu = theta_hat.natural()
    cov = 0.5 * (np.asarray(cov, float) + np.asarray(cov, float).T)
    vals, vecs = np.linalg.eigh(cov)
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    spec = theta_hat.spec
    out, proposed, rejected = [], 0, 0
    while len(out) < n_draws:
        z = rng.standard_normal((batch, mu.size))
        cand = mu + z @ L.T
        for row in cand:
            proposed += 1
            if _draw_ok(row, spec):
                out.append(row)
                if len(out) == n_draws:
                    break
            else:
                rejected += 1
        if rejected > MAX_INVALID_RATE * max(proposed, n_draws):
            raise HarnessError("too many parameter draws outside the parameter space",
                               {"proposed": proposed, "rejected": rejected})
    if rejected:
        log.info("rejected %d of %d parameter draws", rejected, proposed)
    return np.array(out), rejected


def parameter_sampling_distribution(theta_hat: ParameterVector, cov, context: HoldoutContext,
                                    eval_rules, n_draws: int, rng: np.random.Generator, *,
                                    mode: str = "", in_rule: str = "", n: int = 0) -> dict:
    """Holdout score draws induced by N(theta_hat, cov), one set per eval rule.

    ``cov`` is the covariance of the estimator itself (``W / n``).  The
    holdout is held fixed across draws.
    """
    if n_draws < 100:
        raise ValueError("n_draws must be at least 100")
    draws, rejected = gaussian_parameter_draws(theta_hat, cov, n_draws, rng)
    models = theta_hat.models
    out = {}
    for rule in eval_rules:
        scores = np.empty(n_draws)
        with np.errstate(divide="ignore"):
            for i, row in enumerate(draws):
                scores[i] = np.mean(pool_terms(models, row, context.y_prev, context.y, rule))
        _check_finite(scores, "draw score")
        out[rule.id] = ScoreSampleSet(
            scores, "parameter_gaussian", mode, in_rule, rule, n,
            point_estimate=out_of_sample_score(theta_hat, context, rule),
            meta={"rejected": rejected})
    return out


# ---------------------------------------------------------------------------
# replication harness


def rule_from_id(rule_id: str, threshold_for) -> ScoringRule:
    """``"ls"`` or ``"csNN"`` (censoring below the NN% quantile)."""
    rule_id = rule_id.strip().lower()
    if rule_id == "ls":
        return LOG_SCORE
    if rule_id.startswith("cs"):
        p = float(rule_id[2:]) / 100.0
        if not 0 < p < 1:
            raise ValueError(f"bad censoring level in {rule_id!r}")
        return censored_log_score(threshold_for(p), p)
    raise ValueError(f"unknown rule id {rule_id!r}")


@dataclass(frozen=True)
class HarnessConfig:
    """Monte Carlo design.

    ``holdout="tail"`` scores each replication on the last ``holdout_len(n)``
    points of its own path of length ``path_len``.  ``holdout="common"``
    scores all replications on one independent path of ``holdout_fixed``
    points, which removes holdout noise from the between-replication spread.
    """

    modes: tuple = MODES
    in_rules: tuple = ("ls", "cs20")
    eval_rules: tuple = ("ls", "cs20")
    sample_sizes: tuple = (500, 2000)
    replications: int = 200
    seed: int = 20240101
    holdout: str = "tail"
    holdout_factor: int = 100
    holdout_fixed: int | None = None
    path_len: int | None = None
    n_reference: int = 1_000_000
    n_sdgp: int = 1_000_000
    n_quantile: int = 10_000_000
    n_starts: int = 5
    matched_only: bool = False
    dgp: DgpParams = field(default_factory=DgpParams)
    spec: CombinationSpec = DEFAULT_SPEC

    def __post_init__(self):
        bad = set(self.modes) - set(MODES)
        if bad or not self.modes:
            raise ValueError(f"unknown modes {sorted(bad)}")
        if self.holdout not in ("tail", "common"):
            raise ValueError("holdout must be 'tail' or 'common'")
        if self.replications < 1 or not self.sample_sizes:
            raise ValueError("need at least one replication and one sample size")
        if min(self.sample_sizes) < 30:
            raise ValueError("sample sizes must be at least 30")
        if self.holdout == "common" and not self.holdout_fixed:
            raise ValueError("common holdout needs holdout_fixed")
        if self.holdout == "tail" and self.path_len is not None:
            need = max(n + self.holdout_len(n) for n in self.sample_sizes)
            if self.path_len < need:
                raise ValueError(f"path_len must be at least {need}")

    def holdout_len(self, n: int) -> int:
        return int(self.holdout_fixed) if self.holdout_fixed else self.holdout_factor * n

    def path_length(self) -> int:
        if self.holdout == "common":
            return max(self.sample_sizes)
        if self.path_len is not None:
            return self.path_len
        return max(n + self.holdout_len(n) for n in self.sample_sizes)

    def cells(self):
        for n in self.sample_sizes:
            for r in self.in_rules:
                for mode in self.modes:
                    yield n, r, mode

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("dgp", "spec")}
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        d["dgp"] = self.dgp.to_dict()
        d["spec"] = self.spec.to_dict()
        return d


@dataclass
class _Prepared:
    config: HarnessConfig
    rules: dict
    eta_star: dict
    common: HoldoutContext | None


def resolve_rules(config: HarnessConfig, cache_dir=None) -> dict:
    def threshold(p):
        from .models import stationary_quantile
        return stationary_quantile(config.dgp, p, config.n_quantile,
                                   derive_seed(config.seed, "quantile"), cache_dir)

    ids = dict.fromkeys(tuple(config.in_rules) + tuple(config.eval_rules))
    return {i: rule_from_id(i, threshold) for i in ids}


def reference_optima(config: HarnessConfig, rules: dict, cache_dir=None) -> dict:
    seed = derive_seed(config.seed, "reference")
    return {rid: compute_reference_optima(rules[rid], config.dgp, config.n_reference, seed,
                                          spec=config.spec, cache_dir=cache_dir,
                                          n_starts=config.n_starts)
            for rid in config.in_rules}


def _replication(prep: _Prepared, m: int) -> dict:
    """All cells for replication ``m``: {(n, in_rule, mode): {eval_rule: score}}."""
    cfg = prep.config
    path = simulate_dgp_path(cfg.dgp, cfg.path_length(), stream(cfg.seed, "replication", m)).y
    est_seed = derive_seed(cfg.seed, "replication-starts", m)
    out, failures, nonconv = {}, [], []
    for n in cfg.sample_sizes:
        sample = path[:n]
        if prep.common is not None:
            ctx = prep.common
        else:
            ctx = HoldoutContext.from_series(path, path.size - cfg.holdout_len(n))
        for rid in cfg.in_rules:
            rule = prep.rules[rid]
            try:
                two = estimate_two_stage(sample, rule, spec=cfg.spec, n_starts=cfg.n_starts,
                                         seed=est_seed)
                fits = {"two_stage": two}
                if "two_stage_fixed_weight" in cfg.modes:
                    fits["two_stage_fixed_weight"] = with_fixed_weight(two, sample,
                                                                      prep.eta_star[rid])
                if "one_stage" in cfg.modes:
                    fits["one_stage"] = estimate_one_stage(sample, rule, init=two.estimate,
                                                           spec=cfg.spec, n_starts=cfg.n_starts,
                                                           seed=est_seed)
            except (EstimationError, ScoringError, FloatingPointError,
                    np.linalg.LinAlgError, ValueError) as err:
                for mode in cfg.modes:
                    failures.append({"n": n, "in_rule": rid, "mode": mode,
                                     "replication": m, "error": str(err)})
                continue
            for mode in cfg.modes:
                res = fits[mode]
                if not res.converged:
                    nonconv.append({"n": n, "in_rule": rid, "mode": mode, "replication": m})
                ev_ids = [rid] if cfg.matched_only else cfg.eval_rules
                try:
                    out[(n, rid, mode)] = {e: out_of_sample_score(res.estimate, ctx, prep.rules[e])
                                           for e in ev_ids}
                except ScoringError as err:
                    failures.append({"n": n, "in_rule": rid, "mode": mode,
                                     "replication": m, "error": str(err)})
    return {"scores": out, "failures": failures, "nonconverged": nonconv}


def _replication_star(args):
    return _replication(*args)


@dataclass(frozen=True, eq=False)
class HarnessResult:
    config: HarnessConfig
    sets: dict                 # (mode, in_rule, eval_rule, n) -> ScoreSampleSet
    s_dgp: dict                # eval_rule id -> {"value", "se", ...}
    reference: dict            # in_rule id -> (theta_star, theta_zero)
    rules: dict
    failures: list
    nonconverged: list

    def summaries(self) -> dict:
        out = {}
        for key, s in self.sets.items():
            out[key] = summarize(s, self.s_dgp.get(key[2], {}).get("value"))
        return out


def replicate_simulation(config: HarnessConfig, *, cache_dir=None, threads: int = 1,
                         progress=None) -> HarnessResult:
    """Run the replication design; results do not depend on ``threads``."""
    rules = resolve_rules(config, cache_dir)
    reference = reference_optima(config, rules, cache_dir) if (
        "two_stage_fixed_weight" in config.modes) else {}
    eta_star = {rid: ref[0].theta.weights for rid, ref in reference.items()}
    sdgp = {e: s_dgp(config.dgp, rules[e], config.n_sdgp, derive_seed(config.seed, "reference"),
                     cache_dir) for e in config.eval_rules}
    common = None
    if config.holdout == "common":
        hp = simulate_dgp_path(config.dgp, config.holdout_fixed + 1,
                               stream(config.seed, "common-holdout")).y
        common = HoldoutContext(hp[:-1], hp[1:])
    prep = _Prepared(config, rules, eta_star, common)

    M = config.replications
    jobs = [(prep, m) for m in range(M)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = []
            for i, r in enumerate(ex.map(_replication_star, jobs, chunksize=1)):
                results.append(r)
                if progress:
                    progress(i + 1, M)
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_replication_star(job))
            if progress:
                progress(i + 1, M)

    failures = [f for r in results for f in r["failures"]]
    nonconv = [f for r in results for f in r["nonconverged"]]
    by_cell = {}
    for f in failures:
        key = (f["n"], f["in_rule"], f["mode"])
        by_cell[key] = by_cell.get(key, 0) + 1
    worst = max(by_cell.values(), default=0)
    if worst > MAX_FAILURE_RATE * M:
        raise HarnessError(f"{worst} of {M} replications failed in one cell",
                           {"failures": failures[:50], "count": len(failures)})

    sets = {}
    for n, rid, mode in config.cells():
        ev_ids = [rid] if config.matched_only else config.eval_rules
        for e in ev_ids:
            labels = [m for m, r in enumerate(results) if (n, rid, mode) in r["scores"]]
            vals = [results[m]["scores"][(n, rid, mode)][e] for m in labels]
            if len(vals) < 2:
                raise HarnessError(f"fewer than two successful replications for {mode}/{rid}/n={n}")
            sets[(mode, rid, e, n)] = ScoreSampleSet(
                np.array(vals), "monte_carlo_replication", mode, rid, rules[e], n,
                labels=np.array(labels))
    return HarnessResult(config, sets, sdgp, reference, rules, failures, nonconv)


# ---------------------------------------------------------------------------
# writers


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def write_draws(path, sets: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "in_rule", "eval_rule", "n", "replication", "score"])
        for key in sorted(sets, key=_sort_key):
            s = sets[key]
            for lab, v in zip(s.labels, s.draws):
                w.writerow([s.mode, s.in_rule, s.eval_rule.id, s.n, int(lab), _fmt(v)])


def _sort_key(key):
    mode, rid, e, n = key
    return (n, rid, MODES.index(mode) if mode in MODES else 99, mode, e)


def write_summaries(path, summaries: dict) -> None:
    cols = ["mode", "in_rule", "eval_rule", "n", "count", "average", "ci_lo", "ci_hi",
            "variance", "var_ci_lo", "var_ci_hi", "scaled_variance", "s_dgp",
            "expected_divergence"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for key in sorted(summaries, key=_sort_key):
            mode, rid, e, n = key
            s = summaries[key]
            w.writerow([mode, rid, e, n, s.count, _fmt(s.mean), _fmt(s.ci_mean[0]),
                        _fmt(s.ci_mean[1]), _fmt(s.variance), _fmt(s.ci_variance[0]),
                        _fmt(s.ci_variance[1]), _fmt(s.scaled_variance), _fmt(s.s_dgp),
                        _fmt(s.expected_divergence)])


def write_kde(path, grid, density) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "density"])
        for g, d in zip(grid, density):
            w.writerow([_fmt(g), _fmt(d)])
