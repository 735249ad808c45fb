import csv
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from poolcast import estimate as E
from poolcast import evaluate as V
from poolcast.pool import DEFAULT_SPEC, WeightVector, pool_density_function
from poolcast.rng import stream
from poolcast.scoring import LOG_SCORE, average_score, censored_log_score

THETA = E.ParameterVector.from_natural(DEFAULT_SPEC, [0.45, 0.0, 0.5, 0.65, 0.0, 0.28, 0.73])


def test_holdout_context(dgp_series):
    ctx = V.HoldoutContext.from_series(dgp_series, 1500, 2000)
    assert len(ctx) == 500
    assert np.array_equal(ctx.y_prev[1:], ctx.y[:-1])
    with pytest.raises(ValueError):
        V.HoldoutContext.from_series(dgp_series, 0, 10)
    with pytest.raises(ValueError):
        V.HoldoutContext([1.0], [1.0, 2.0])


def test_oos_equals_average_score_on_holdout(dgp_series):
    ctx = V.HoldoutContext.from_series(dgp_series, 1500)
    for rule in (LOG_SCORE, censored_log_score(-0.6)):
        a = V.out_of_sample_score(THETA, ctx, rule)
        b = average_score(rule, pool_density_function(THETA.models, THETA.natural()),
                          dgp_series, (1500, 2000))
        assert abs(a - b) < 1e-13


def test_oos_degenerate_weight(dgp_series):
    ctx = V.HoldoutContext.from_series(dgp_series, 1000)
    th = THETA.with_weights(WeightVector.pair(1.0))
    ar_only = average_score(LOG_SCORE, lambda yp: th.models[0].predictive(th.gammas[0], yp),
                            dgp_series, (1000, 2000))
    assert abs(V.out_of_sample_score(th, ctx, LOG_SCORE) - ar_only) < 1e-13


def test_true_predictive_beats_pools(dgp, dgp_path):
    rng = np.random.default_rng(0)
    ctx = V.HoldoutContext(dgp_path.y[:-1], dgp_path.y[1:])
    for rule in (LOG_SCORE, censored_log_score(-0.59)):
        s0 = V.dgp_scores(dgp_path, dgp, rule)[1:].mean()
        for _ in range(50):
            u = THETA.to_unconstrained() + rng.normal(0, 0.5, 7)
            th = E.ParameterVector.from_unconstrained(DEFAULT_SPEC, u)
            assert s0 > V.out_of_sample_score(th, ctx, rule)


def test_s_dgp(dgp, cache_dir):
    a = V.s_dgp(dgp, LOG_SCORE, 200_000, 1, cache_dir)
    b = V.s_dgp(dgp, LOG_SCORE, 200_000, 2, cache_dir)
    assert abs(a["value"] - b["value"]) < 3 * math.hypot(a["se"], b["se"])
    wide = V.s_dgp(dgp, censored_log_score(1e6), 200_000, 1, cache_dir)
    assert abs(wide["value"] - a["value"]) < 1e-12
    assert V.s_dgp(dgp, LOG_SCORE, 200_000, 1, cache_dir) == a
    with pytest.raises(ValueError):
        V.s_dgp(dgp, LOG_SCORE, 1000, 1)


def test_summarize_basics():
    s = V.summarize(np.full(40, 2.5), s_dgp_value=3.0, n=100)
    assert s.variance == 0 and s.ci_variance == (0.0, 0.0) and s.ci_mean == (2.5, 2.5)
    assert s.expected_divergence == 0.5
    x = np.random.default_rng(1).normal(size=100)
    s = V.summarize(x, n=10)
    assert s.ci_mean[0] < s.mean < s.ci_mean[1]
    assert s.ci_variance[0] <= s.variance <= s.ci_variance[1]
    assert math.isclose(s.scaled_variance, 10 * np.var(x))


def test_summarize_mean_coverage():
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(1000):
        s = V.summarize(rng.normal(1.0, 2.0, 200))
        hits += s.ci_mean[0] <= 1.0 <= s.ci_mean[1]
    assert 930 <= hits <= 970


def test_percentile_ci_ranks():
    x = np.random.default_rng(3).permutation(np.arange(1, 20001, dtype=float))
    assert V.percentile_ci(x, 0.95) == (500.0, 19500.0)
    assert V.percentile_ci(x, 1.0) == (1.0, 20000.0)
    u = np.random.default_rng(4).uniform(size=100_000)
    lo, hi = V.percentile_ci(u, 0.95)
    assert abs(lo - 0.025) < 0.005 and abs(hi - 0.975) < 0.005


def test_kde():
    x = np.random.default_rng(5).standard_normal(10_000)
    grid, dens = V.kde(x, np.linspace(-8, 8, 4001))
    assert abs(dens[2000] - 0.3989) < 0.03
    assert abs(trapezoid(dens, grid) - 1) < 1e-3
    assert V.silverman_bandwidth(x) > 0
    g, d = V.kde(x)
    assert abs(trapezoid(d, g) - 1) < 1e-3
    with pytest.warns(RuntimeWarning):
        g, d = V.kde(np.full(50, 1.0))
    assert np.all(np.isfinite(d))
    with pytest.raises(ValueError):
        V.kde(x[:5])


def test_parameter_draws(dgp_series):
    ctx = V.HoldoutContext.from_series(dgp_series, 1500)
    sets = V.parameter_sampling_distribution(THETA, np.zeros((7, 7)), ctx, [LOG_SCORE], 100,
                                             stream(1, "d"))
    s = sets["ls"]
    assert np.all(s.draws == s.draws[0]) and s.draws[0] == s.point_estimate
    cov = np.diag([1e-3, 1e-4, 1e-3, 1e-3, 1e-4, 1e-3, 1e-3])
    a = V.parameter_sampling_distribution(THETA, cov, ctx, [LOG_SCORE], 2000, stream(2, "d"))["ls"]
    b = V.parameter_sampling_distribution(THETA, cov, ctx, [LOG_SCORE], 4000, stream(3, "d"))["ls"]
    lo_a, hi_a = V.percentile_ci(a)
    lo_b, hi_b = V.percentile_ci(b)
    # Monte Carlo s.e. of an extreme sample quantile: sqrt(p(1-p)/N) / density
    f = V.kde(a, np.array([lo_a, hi_a]))[1]
    se_diff = math.sqrt(0.025 * 0.975 * (1 / 2000 + 1 / 4000)) / f
    assert abs(lo_a - lo_b) < 2 * se_diff[0] and abs(hi_a - hi_b) < 2 * se_diff[1]
    assert lo_a <= a.point_estimate <= hi_a


def test_parameter_draws_abort_on_invalid(dgp_series):
    ctx = V.HoldoutContext.from_series(dgp_series, 1500)
    cov = np.diag([1.0] * 7)
    with pytest.raises(V.HarnessError):
        V.parameter_sampling_distribution(THETA, cov, ctx, [LOG_SCORE], 200, stream(1, "bad"))
    with pytest.raises(ValueError):
        V.parameter_sampling_distribution(THETA, np.zeros((7, 7)), ctx, [LOG_SCORE], 50,
                                          stream(1, "d"))


def test_score_sample_set_invariants():
    with pytest.raises(ValueError):
        V.ScoreSampleSet([1.0], "monte_carlo_replication", "one_stage", "ls", LOG_SCORE, 10)
    with pytest.raises(ValueError):
        V.ScoreSampleSet([1.0, np.nan], "monte_carlo_replication", "one_stage", "ls", LOG_SCORE, 10)
    with pytest.raises(ValueError):
        V.ScoreSampleSet([1.0, 2.0], "bootstrap", "one_stage", "ls", LOG_SCORE, 10)


def _small_config(**kw):
    base = dict(modes=("two_stage",), in_rules=("ls",), eval_rules=("ls",), sample_sizes=(500,),
                replications=3, seed=42, holdout_fixed=2000, n_reference=100_000,
                n_sdgp=100_000, n_quantile=100_000)
    base.update(kw)
    return V.HarnessConfig(**base)


def test_replicate_small_and_deterministic(cache_dir):
    cfg = _small_config()
    a = V.replicate_simulation(cfg, cache_dir=cache_dir)
    b = V.replicate_simulation(cfg, cache_dir=cache_dir)
    s = a.sets[("two_stage", "ls", "ls", 500)]
    assert len(s) == 3 and s.source == "monte_carlo_replication"
    assert np.array_equal(s.draws, b.sets[("two_stage", "ls", "ls", 500)].draws)


def test_replicate_thread_invariance(cache_dir):
    cfg = _small_config(modes=("two_stage", "two_stage_fixed_weight"), in_rules=("cs20",),
                        eval_rules=("ls", "cs20"), holdout="common")
    a = V.replicate_simulation(cfg, cache_dir=cache_dir, threads=1)
    b = V.replicate_simulation(cfg, cache_dir=cache_dir, threads=2)
    assert a.sets.keys() == b.sets.keys()
    for k in a.sets:
        assert np.array_equal(a.sets[k].draws, b.sets[k].draws)
    assert len(a.sets) == 4


def test_replication_exchangeable(cache_dir):
    cfg = _small_config(replications=6)
    s = V.replicate_simulation(cfg, cache_dir=cache_dir).sets[("two_stage", "ls", "ls", 500)]
    perm = np.random.default_rng(0).permutation(6)
    a, b = V.summarize(s.draws), V.summarize(s.draws[perm])
    assert abs(a.mean - b.mean) < 1e-12 and abs(a.variance - b.variance) < 1e-12


def test_failures_abort(cache_dir, monkeypatch):
    calls = {"k": 0}
    real = V.estimate_two_stage

    def flaky(*a, **k):
        calls["k"] += 1
        if calls["k"] == 2:
            raise E.EstimationError("no start converged", stage="stage1:ar1")
        return real(*a, **k)

    monkeypatch.setattr(V, "estimate_two_stage", flaky)
    with pytest.raises(V.HarnessError):
        V.replicate_simulation(_small_config(replications=4), cache_dir=cache_dir)
    calls["k"] = 0
    res = V.replicate_simulation(_small_config(replications=21), cache_dir=cache_dir)
    s = res.sets[("two_stage", "ls", "ls", 500)]
    assert len(s) == 20 and 1 not in s.labels and len(res.failures) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        V.HarnessConfig(modes=("bogus",))
    with pytest.raises(ValueError):
        V.HarnessConfig(holdout="common")
    with pytest.raises(ValueError):
        V.HarnessConfig(sample_sizes=(500,), path_len=1000)
    full = V.HarnessConfig(sample_sizes=tuple(range(500, 2001)), replications=1000,
                           path_len=250_000)
    assert full.holdout_len(2000) == 200_000 and full.path_length() == 250_000


def test_writers(tmp_path, cache_dir):
    res = V.replicate_simulation(_small_config(), cache_dir=cache_dir)
    V.write_draws(tmp_path / "d.csv", res.sets)
    V.write_summaries(tmp_path / "s.csv", res.summaries())
    rows = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert [r["replication"] for r in rows] == ["0", "1", "2"]
    assert set(rows[0]) == {"mode", "in_rule", "eval_rule", "n", "replication", "score"}
    summ = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert float(summ[0]["ci_lo"]) <= float(summ[0]["average"]) <= float(summ[0]["ci_hi"])
    V.write_kde(tmp_path / "k.csv", *V.kde(np.random.default_rng(0).normal(size=50)))
    assert open(tmp_path / "k.csv").readline().strip() == "grid,density"
