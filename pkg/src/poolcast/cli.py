"""Command-line front end.

    poolcast replicate|empirical|reference|score --config run.toml
             [--dry-run] [--threads N] [--seed S] [--out DIR]

Flags override the config file.  Result files carry no timestamps or
timings, so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import AsymptoticsError, sandwich
from .estimate import (EstimationError, ParameterVector, estimate_one_stage,
                       estimate_two_stage)
from .evaluate import (HarnessConfig, HarnessError, HoldoutContext, kde,
                       out_of_sample_score, parameter_sampling_distribution, percentile_ci,
                       replicate_simulation, resolve_rules, reference_optima, rule_from_id,
                       s_dgp, write_draws, write_kde, write_summaries)
from .models import DgpParams
from .pool import CombinationSpec
from .rng import derive_seed, stream
from .scoring import ScoringError
from .series import SampleSplit, SeriesError, load_csv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("poolcast")

SCHEMA_VERSION = 1
COMMANDS = ("replicate", "empirical", "reference", "score")
OUTPUT_ENV = "POOLCAST_OUTPUT_DIR"
CACHE_ENV = "POOLCAST_CACHE_DIR"
BUNDLED = "bundled"

# rough single-core costs, measured on the default pool
SEC_PER_ESTIMATION_OBS = 2.2e-4
SEC_PER_SIMULATED_OBS = 1.2e-6
SEC_PER_DRAW_OBS = 4e-8


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    out: Path
    cache_dir: Path
    threads: int
    dgp: DgpParams
    spec: CombinationSpec
    section: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config file {path}: {err}") from None


def build_config(command: str, raw: dict, args=None) -> RunConfig:
    """Merge the config file with command-line overrides and validate."""
    raw = json.loads(json.dumps(raw))   # private copy
    get = (lambda k: getattr(args, k, None)) if args is not None else (lambda k: None)
    if get("seed") is not None:
        raw["seed"] = get("seed")
    if "seed" not in raw:
        raise ConfigError("config must set an explicit integer 'seed'")
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("'seed' must be a nonnegative integer")
    if get("threads") is not None:
        raw["threads"] = get("threads")
    threads = int(raw.get("threads", os.cpu_count() or 1))
    if threads < 1:
        raise ConfigError("'threads' must be at least 1")
    raw["threads"] = threads
    out = get("out") or raw.get("out") or os.path.join(
        os.environ.get(OUTPUT_ENV, "poolcast-results"), command)
    raw["out"] = str(out)
    cache_dir = raw.get("cache_dir") or os.environ.get(CACHE_ENV) or os.path.join(
        str(Path(out).parent), "cache")
    try:
        dgp = DgpParams(**raw.get("dgp", {}))
        spec = CombinationSpec(tuple(raw.get("constituents", ("ar1", "arch1"))))
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"invalid model settings: {err}") from None
    section = raw.get(command, {})
    if command == "reference" and "reference" not in raw:
        # same harness settings, hence the same cache keys, as a replicate run
        section = raw.get("replicate", {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] must be a table")
    cfg = RunConfig(command, raw["seed"], Path(out), Path(cache_dir), threads, dgp, spec,
                    section, raw)
    VALIDATORS[command](cfg)
    return cfg


# ---------------------------------------------------------------------------
# validation


_HARNESS_KEYS = {"modes", "in_rules", "eval_rules", "sample_sizes", "replications", "holdout",
                 "holdout_factor", "holdout_fixed", "path_len", "n_reference", "n_sdgp",
                 "n_quantile", "n_starts", "matched_only"}


def harness_config(cfg: RunConfig) -> HarnessConfig:
    extra = set(cfg.section) - _HARNESS_KEYS
    if extra:
        raise ConfigError(f"unknown [{cfg.command}] keys: {sorted(extra)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.section.items()}
    try:
        return HarnessConfig(seed=cfg.seed, dgp=cfg.dgp, spec=cfg.spec, **kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def _check_rule_ids(ids):
    for r in ids:
        try:
            rule_from_id(r, lambda p: 0.0)
        except ValueError as err:
            raise ConfigError(str(err)) from None


def _validate_replicate(cfg):
    h = harness_config(cfg)
    _check_rule_ids(h.in_rules + h.eval_rules)
    if h.n_reference < 100_000 or h.n_sdgp < 100_000:
        raise ConfigError("n_reference and n_sdgp must be at least 100000")


def _validate_reference(cfg):
    _validate_replicate(cfg)


_EMPIRICAL_KEYS = {"input", "in_sample", "holdout", "modes", "in_rules", "eval_rules",
                   "n_draws", "level", "kde_points", "n_starts"}


def _validate_empirical(cfg):
    s = cfg.section
    extra = set(s) - _EMPIRICAL_KEYS
    if extra:
        raise ConfigError(f"unknown [empirical] keys: {sorted(extra)}")
    for key in ("in_sample", "holdout"):
        if key not in s:
            raise ConfigError(f"[empirical] needs '{key}'")
    try:
        SampleSplit(int(s["in_sample"]), int(s["holdout"]))
    except ValueError as err:
        raise ConfigError(f"invalid split: {err}") from None
    src = s.get("input", BUNDLED)
    if src != BUNDLED and not Path(src).is_file():
        raise ConfigError(f"input file not found: {src}")
    modes = s.get("modes", ["one_stage", "two_stage"])
    if not set(modes) <= {"one_stage", "two_stage"}:
        raise ConfigError("empirical modes must be one_stage and/or two_stage")
    _check_rule_ids(s.get("in_rules", ["ls"]) + s.get("eval_rules", ["ls"]))
    if int(s.get("n_draws", 20000)) < 100:
        raise ConfigError("n_draws must be at least 100")
    if not 0 < float(s.get("level", 0.95)) <= 1:
        raise ConfigError("level must lie in (0, 1]")


_SCORE_KEYS = {"input", "theta", "rules", "start", "stop"}


def _validate_score(cfg):
    s = cfg.section
    extra = set(s) - _SCORE_KEYS
    if extra:
        raise ConfigError(f"unknown [score] keys: {sorted(extra)}")
    if "theta" not in s:
        raise ConfigError("[score] needs 'theta' (natural parameter vector)")
    if len(s["theta"]) != cfg.spec.dim:
        raise ConfigError(f"theta must have {cfg.spec.dim} entries")
    src = s.get("input", BUNDLED)
    if src != BUNDLED and not Path(src).is_file():
        raise ConfigError(f"input file not found: {src}")
    _check_rule_ids(s.get("rules", ["ls"]))


VALIDATORS = {"replicate": _validate_replicate, "empirical": _validate_empirical,
              "reference": _validate_reference, "score": _validate_score}


# ---------------------------------------------------------------------------
# helpers


def _load_input(src):
    if src == BUNDLED:
        with resources.as_file(resources.files("poolcast") / "data" / "synthetic_returns.csv") as p:
            return load_csv(p)
    return load_csv(src)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")


def _json_default(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _echo(cfg: RunConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "version": __version__, "command": cfg.command,
            "config": {k: v for k, v in cfg.raw.items()
                       if k not in ("out", "cache_dir", "threads")}}


def estimate_cost(cfg: RunConfig) -> dict:
    """Order-of-magnitude single-core runtime for a validated config."""
    if cfg.command in ("replicate", "reference"):
        h = harness_config(cfg)
        q = h.n_quantile * SEC_PER_SIMULATED_OBS
        ref = len(h.in_rules) * h.n_reference * (SEC_PER_ESTIMATION_OBS + SEC_PER_SIMULATED_OBS)
        sd = h.n_sdgp * SEC_PER_SIMULATED_OBS * (1 + len(h.eval_rules))
        est = 0.0
        if cfg.command == "replicate":
            per_rep = sum(n for n in h.sample_sizes) * len(h.in_rules) * SEC_PER_ESTIMATION_OBS * 4.5
            per_rep += h.path_length() * SEC_PER_SIMULATED_OBS
            est = per_rep * h.replications
        total = q + ref + sd + est
        return {"estimations": len(h.sample_sizes) * len(h.in_rules) * h.replications * 2
                if cfg.command == "replicate" else 2 * len(h.in_rules),
                "seconds_single_core": round(total, 1),
                "seconds_wall": round(q + ref + sd + est / cfg.threads, 1),
                "threads": cfg.threads, "cached_parts_excluded": False}
    if cfg.command == "empirical":
        s = cfg.section
        rows = len(s.get("in_rules", ["ls"])) * len(s.get("modes", ["one_stage", "two_stage"]))
        n, tau = int(s["in_sample"]), int(s["holdout"])
        draws = int(s.get("n_draws", 20000)) * tau * len(s.get("eval_rules", ["ls"])) * rows
        total = rows * n * SEC_PER_ESTIMATION_OBS * 4.5 + draws * SEC_PER_DRAW_OBS
        return {"rows": rows, "seconds_single_core": round(total, 1)}
    return {"seconds_single_core": 0.1}


# ---------------------------------------------------------------------------
# commands


def cmd_reference(cfg: RunConfig) -> dict:
    h = harness_config(cfg)
    rules = resolve_rules(h, cfg.cache_dir)
    refs = reference_optima(h, rules, cfg.cache_dir)
    seed = derive_seed(h.seed, "reference")
    out = {"schema_version": SCHEMA_VERSION, "rules": {}}
    for rid in dict.fromkeys(h.in_rules + h.eval_rules):
        entry = {"rule": rules[rid].to_dict(),
                 "s_dgp": s_dgp(h.dgp, rules[rid], h.n_sdgp, seed, cfg.cache_dir)}
        if rid in refs:
            star, zero = refs[rid]
            entry["theta_star"] = star.to_dict()
            entry["theta_zero"] = zero.to_dict()
        out["rules"][rid] = entry
    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump(cfg.out / "reference.json", out)
    _dump(cfg.out / "config.json", _echo(cfg))
    return {"files": ["reference.json", "config.json"]}


def cmd_replicate(cfg: RunConfig) -> dict:
    h = harness_config(cfg)

    def progress(i, M):
        if i == M or i % max(1, M // 10) == 0:
            log.info("replication %d/%d", i, M)

    res = replicate_simulation(h, cache_dir=cfg.cache_dir, threads=cfg.threads,
                               progress=progress)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_draws(cfg.out / "draws.csv", res.sets)
    summaries = res.summaries()
    write_summaries(cfg.out / "summaries.csv", summaries)
    kde_dir = cfg.out / "kde"
    kde_dir.mkdir(exist_ok=True)
    files = ["draws.csv", "summaries.csv"]
    for (mode, rid, e, n), s in sorted(res.sets.items()):
        if len(s) >= 10:
            name = f"kde_{mode}_{rid}_{e}_n{n}.csv"
            write_kde(kde_dir / name, *kde(s))
            files.append(f"kde/{name}")
    meta = {"schema_version": SCHEMA_VERSION,
            "rules": {k: r.to_dict() for k, r in res.rules.items()},
            "s_dgp": res.s_dgp,
            "reference": {k: {"theta_star": a.to_dict(), "theta_zero": b.to_dict()}
                          for k, (a, b) in res.reference.items()},
            "failures": res.failures, "failure_count": len(res.failures),
            "nonconverged": res.nonconverged, "nonconverged_count": len(res.nonconverged)}
    _dump(cfg.out / "metadata.json", meta)
    _dump(cfg.out / "config.json", _echo(cfg))
    return {"files": files + ["metadata.json", "config.json"]}


def cmd_empirical(cfg: RunConfig) -> dict:
    s = cfg.section
    series = _load_input(s.get("input", BUNDLED))
    split = SampleSplit(int(s["in_sample"]), int(s["holdout"]))
    try:
        split.validate(len(series))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    n, tau = split.in_sample_len, split.holdout_len
    insample = series[:n]
    ctx = HoldoutContext.from_series(series, n, n + tau)
    in_ids = list(s.get("in_rules", ["ls", "cs10", "cs20"]))
    ev_ids = list(s.get("eval_rules", ["ls", "cs10", "cs20"]))
    modes = list(s.get("modes", ["one_stage", "two_stage"]))
    n_draws = int(s.get("n_draws", 20000))
    level = float(s.get("level", 0.95))
    n_starts = int(s.get("n_starts", 5))
    q = lambda p: float(np.quantile(insample.values, p))  # noqa: E731
    rules = {r: rule_from_id(r, q) for r in dict.fromkeys(in_ids + ev_ids)}

    cfg.out.mkdir(parents=True, exist_ok=True)
    kde_dir = cfg.out / "kde"
    kde_dir.mkdir(exist_ok=True)
    rows, details, notices = [], {}, []
    for rid in in_ids:
        two = estimate_two_stage(insample, rules[rid], spec=cfg.spec, n_starts=n_starts,
                                 seed=derive_seed(cfg.seed, "empirical", rid))
        fits = {"two_stage": two}
        if "one_stage" in modes:
            fits["one_stage"] = estimate_one_stage(insample, rules[rid], init=two.estimate,
                                                   n_starts=n_starts,
                                                   seed=derive_seed(cfg.seed, "empirical", rid))
        for mode in modes:
            fit = fits[mode]
            row = {"in_rule": rid, "mode": mode}
            detail = {"estimation": fit.to_dict()}
            sets = None
            try:
                sw = sandwich(mode, fit.estimate, insample, rules[rid])
                detail["sandwich"] = sw.to_dict()
                sets = parameter_sampling_distribution(
                    fit.estimate, sw.W / sw.n, ctx, [rules[e] for e in ev_ids], n_draws,
                    stream(cfg.seed, "empirical-draws", rid, mode), mode=mode, in_rule=rid, n=n)
            except (AsymptoticsError, HarnessError) as err:
                notice = f"{mode}/{rid}: Gaussian-draw stage disabled: {err}"
                log.warning(notice)
                notices.append(notice)
            for e in ev_ids:
                point = out_of_sample_score(fit.estimate, ctx, rules[e])
                row[f"{e}_average"] = point
                if sets is None:
                    row[f"{e}_ci_lo"] = row[f"{e}_ci_hi"] = None
                    continue
                lo, hi = percentile_ci(sets[e], level)
                row[f"{e}_ci_lo"], row[f"{e}_ci_hi"] = lo, hi
                if not lo <= point <= hi:
                    log.warning("%s/%s: point estimate for %s outside its percentile interval",
                                mode, rid, e)
                write_kde(kde_dir / f"kde_{mode}_{rid}_{e}.csv",
                          *kde(sets[e], n_grid=int(s.get("kde_points", 512))))
            rows.append(row)
            details[f"{mode}/{rid}"] = detail

    cols = ["in_rule", "mode"] + [f"{e}_{c}" for e in ev_ids for c in ("average", "ci_lo", "ci_hi")]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(
            "" if row[c] is None else (row[c] if isinstance(row[c], str) else format(row[c], ".17g"))
            for c in cols))
    (cfg.out / "table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _dump(cfg.out / "details.json", {
        "schema_version": SCHEMA_VERSION, "n": n, "tau": tau, "level": level,
        "n_draws": n_draws, "rules": {k: r.to_dict() for k, r in rules.items()},
        "rows": details, "notices": notices})
    _dump(cfg.out / "config.json", _echo(cfg))
    return {"files": ["table.csv", "details.json", "config.json"], "notices": notices}


def cmd_score(cfg: RunConfig) -> dict:
    s = cfg.section
    series = _load_input(s.get("input", BUNDLED))
    theta = ParameterVector.from_natural(cfg.spec, s["theta"])
    y = series.values
    start, stop = int(s.get("start", 1)), int(s.get("stop", y.size))
    ctx = HoldoutContext.from_series(series, start, stop)
    q = lambda p: float(np.quantile(y, p))  # noqa: E731
    out = {"schema_version": SCHEMA_VERSION, "theta": theta.to_dict(),
           "start": start, "stop": stop, "scores": {}}
    for rid in s.get("rules", ["ls"]):
        rule = rule_from_id(rid, q)
        out["scores"][rid] = {"rule": rule.to_dict(),
                              "average": out_of_sample_score(theta, ctx, rule)}
    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump(cfg.out / "scores.json", out)
    _dump(cfg.out / "config.json", _echo(cfg))
    return {"files": ["scores.json", "config.json"]}


RUNNERS = {"replicate": cmd_replicate, "empirical": cmd_empirical,
           "reference": cmd_reference, "score": cmd_score}


# ---------------------------------------------------------------------------
# entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poolcast",
                                description="Score-based estimation of forecast pools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--dry-run", action="store_true", help="validate and print a cost estimate")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV}/<command>)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _report(kind: str, err: BaseException, out: Path | None, code: int) -> int:
    report = {"schema_version": SCHEMA_VERSION, "status": "error", "kind": kind,
              "type": type(err).__name__, "message": str(err)}
    details = getattr(err, "details", None) or getattr(err, "diagnostics", None)
    if details:
        report["details"] = details
    text = json.dumps(report, sort_keys=True, default=_json_default)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.command, _read_toml(args.config), args)
    except ConfigError as err:
        return _report("config", err, None, 2)
    if args.dry_run:
        print(json.dumps({"status": "valid", "command": cfg.command,
                          "cost_estimate": estimate_cost(cfg)}, sort_keys=True))
        return 0
    try:
        result = RUNNERS[cfg.command](cfg)
    except ConfigError as err:
        return _report("config", err, cfg.out, 2)
    except (EstimationError, HarnessError, AsymptoticsError, ScoringError, SeriesError,
            ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as err:
        log.debug("%s", traceback.format_exc())
        return _report("pipeline", err, cfg.out, 1)
    stale = cfg.out / "error.json"
    if stale.exists():
        stale.unlink()
    print(json.dumps({"status": "ok", "command": cfg.command, "out": str(cfg.out),
                      **result}, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
