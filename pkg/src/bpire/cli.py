"""Command-line front end: ``bpire validate | run | suite``.

A run config is a JSON object::

    {"experiment": "decay", "model_file": "models/mstar.json", "seed": 7,
     "parameters": {"k": 1, "j": 1, "n_list": [6, 7, 8], "R": 10000},
     "name": "decay_k1j1", "out_dir": "out"}

``model_file`` is resolved relative to the config file; an inline ``model``
object may be given instead. The config hash covers the experiment, the
model contents, the parameters and the seed, but not the output location or
the worker count, neither of which can change a result.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import stats
from .env_model import EnvironmentModel, InvalidSpecError, sample_env, validate_assumptions
from .pgf_engine import annealed_prob, quenched_eval, quenched_law_dft, quenched_law_series
from .rwalk import minima_density_check, walk_stats
from .simulator import delta_records

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SCHEMA_PATH = Path(__file__).with_name("model.schema.json")
DEFAULT_ASSUMPTIONS = {"delta": 0.5, "p": 2.0, "q": 2.0}


class ConfigError(Exception):
    """Unusable input: bad JSON, unknown experiment, missing parameters."""


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def model_from_document(doc, where: str = "model") -> EnvironmentModel:
    schema = json.loads(SCHEMA_PATH.read_text())
    try:
        jsonschema.validate(doc, schema)
        return EnvironmentModel.from_dict(doc)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {loc}: {exc.message}") from None
    except InvalidSpecError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_model(path) -> EnvironmentModel:
    return model_from_document(read_json(path), str(path))


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(experiment: str, model: EnvironmentModel, parameters: dict, seed: int) -> str:
    doc = {"experiment": experiment, "model": model.to_dict(), "parameters": parameters, "seed": seed}
    return hashlib.sha256(canonical(doc).encode()).hexdigest()


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    rows: list
    passed: bool
    metrics: dict
    law: object = None  # a QuenchedLaw for the exact-law experiment


@dataclass(frozen=True)
class Experiment:
    run: Callable
    required: tuple
    one_of: tuple = ()  # groups where at least one name must be present


def _need(params: dict, exp: Experiment, name: str) -> None:
    missing = [p for p in exp.required if p not in params]
    for group in exp.one_of:
        if not any(g in params for g in group):
            missing.append(" or ".join(group))
    if missing:
        raise ConfigError(f"experiment {name!r} is missing parameters: {', '.join(missing)}")


def _exp_decay(model, P, seed, workers):
    pairs = [tuple(x) for x in P.get("kj", [[P.get("k", 1), P.get("j", 1)]])]
    r2_min = P.get("r2_min", 0.98)
    fits, rows, metrics = {}, [], {}
    ok = True
    for i, (k, j) in enumerate(pairs):
        f = stats.decay_rate(model, k, j, P["n_list"], P["R"], seed + i, min_n=P.get("min_n", 5), workers=workers)
        fits[k, j] = f
        rows += f.rows("decay")
        good = f.slope < 0 and f.upper(0.99) < 0 and f.r_squared >= r2_min
        rng_ok = f.agrees_with(f.range_fit)
        metrics[f"k={k},j={j}"] = {
            "slope": f.slope,
            "slope_se": f.slope_se,
            "upper99": f.upper(0.99),
            "r_squared": f.r_squared,
            "birge": f.birge,
            "range_slope": f.range_fit.slope,
            "range_slope_se": f.range_fit.slope_se,
            "range_within_3se": rng_ok,
        }
        ok &= good and rng_ok
    pair_ok = {}
    keys = list(fits)
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            fa, fb = fits[keys[a]], fits[keys[b]]
            z = abs(fa.slope - fb.slope) / math.hypot(fa.slope_se, fb.slope_se)
            pair_ok[f"{keys[a]} vs {keys[b]}"] = {"z": z, "pass": z <= 3}
            ok &= z <= 3
    metrics["pairwise"] = pair_ok
    return Outcome(rows, bool(ok), metrics)


def _fit_verdict(fit, r2_min):
    m = {"slope": fit.slope, "slope_se": fit.slope_se, "upper99": fit.upper(0.99), "r_squared": fit.r_squared}
    return fit.upper(0.99) < 0 and fit.r_squared >= r2_min, m


def _exp_extinction(model, P, seed, workers):
    f = stats.extinction_decay(model, P["k"], P["n_list"], P["R"], seed, P.get("min_n", 5), workers)
    ok, m = _fit_verdict(f, P.get("r2_min", 0.95))
    return Outcome(f.rows("extinction"), ok, m)


def _exp_lowerdev(model, P, seed, workers):
    theta = P["theta"] if "theta" in P else P["theta_over_mu"] * walk_stats(model).mu
    res = stats.lower_deviation(model, P["k"], theta, P["n_list"], P["R"], seed, P.get("K", 1024), P.get("min_n", 5), workers)
    ok, m = _fit_verdict(res.fit, P.get("r2_min", 0.95))
    m["theta"] = theta
    m["methods"] = {str(n): v for n, v in res.methods.items()}
    return Outcome(res.fit.rows("lowerdev"), ok, m)


def _exp_harmonic(model, P, seed, workers):
    alphas = P["alpha"] if isinstance(P["alpha"], list) else [P["alpha"]]
    rows, metrics, ok = [], {}, True
    for a in alphas:
        h = stats.harmonic_moment(
            model, P["k"], a, P["n_list"], P["R"], seed, P.get("K", 128), P.get("mode", "hybrid"), P.get("n0"), P.get("min_n", 5), workers
        )
        rows += h.fit.rows("harmonic")
        good = h.fit.upper(0.99) < 0
        metrics[f"alpha={a:g}"] = {"slope": h.fit.slope, "slope_se": h.fit.slope_se, "upper99": h.fit.upper(0.99), "pass": good}
        ok &= good
    return Outcome(rows, bool(ok), metrics)


def _exp_logmoment(model, P, seed, workers):
    s = stats.log_moment_on_extinction_step(model, P["k"], P["j_power"], P["n_list"], P["R"], seed, P.get("K", 64), P.get("level", 0.01), workers)
    m = {"decreases": s.decreases, "comparisons": s.comparisons, "sign_p_value": s.sign_p_value}
    return Outcome(s.rows("logmoment"), s.decreasing, m)


def _exp_clt(model, P, seed, workers):
    reps = [stats.clt_test(model, P["k"], int(n), P["R"], seed, workers) for n in P["n_list"]]
    rows = [("clt", "ks_stat", r.n, r.ks_stat, "") for r in reps]
    ks = [r.ks_stat for r in reps]
    ok = all(b < a for a, b in zip(ks, ks[1:]))
    if "ks_max" in P:
        ok &= ks[-1] < P["ks_max"]
    m = {str(r.n): {"ks_stat": r.ks_stat, "survivors": r.n_samples, "attempts": r.attempts} for r in reps}
    return Outcome(rows, bool(ok), m)


def _exp_edgeworth(model, P, seed, workers):
    k = P["k"]
    sh = stats.estimate_shift(model, k, P["n_list"], P["R"], seed, workers=workers)
    n = int(P["n"])
    seeds = [seed + 1 + i for i in range(P.get("seeds", 5))]
    g3, ph = [], []
    rows = [("edgeworth", "shift_b", nn, e, s) for nn, e, s in sh.per_n]
    rows.append(("edgeworth", "shift_b_fit", "", sh.b, sh.std_error))
    for sd in seeds:
        (r,) = stats.edgeworth_test(model, k, [n], P["R"], sd, sh.b, workers)
        g3.append(r.scaled_g3)
        ph.append(r.scaled_phi)
        rows.append(("edgeworth", f"sqrt_n_D_g3[seed={sd}]", n, r.scaled_g3, ""))
        rows.append(("edgeworth", f"sqrt_n_D_phi[seed={sd}]", n, r.scaled_phi, ""))
    med_g3, med_phi = float(np.median(g3)), float(np.median(ph))
    m = {"shift_b": sh.b, "shift_b_se": sh.std_error, "median_sqrt_n_D_g3": med_g3, "median_sqrt_n_D_phi": med_phi}
    if P.get("exact_n"):
        ex = stats.edgeworth_exact_small_n(model, k, sh.b, P.get("exact_R", 1000), seed, P["exact_n"], P.get("M", 4096))
        rows.append(("edgeworth", "exact_D_g3", ex.n, ex.D_g3, ""))
        rows.append(("edgeworth", "exact_D_phi", ex.n, ex.D_phi, ""))
        m["exact_small_n"] = {"n": ex.n, "D_g3": ex.D_g3, "D_phi": ex.D_phi, "max_tail": ex.max_tail}
    return Outcome(rows, med_g3 < med_phi, m)


def _exp_phi(model, P, seed, workers):
    k = P["k"]
    t = stats.phi_convergence(model, k, P["s_list"], P["n_list"], P["R"], seed, workers=workers)
    rows = t.rows("phi")
    m, ok = {}, True
    for s, f in t.slopes.items():
        m[f"slope[s={s:g}]"] = f.slope
        ok &= f.slope < 0
    if 0 in t.s_list:
        a = t.s_list.index(0)
        worst = 0.0
        for b, n in enumerate(t.n_list):
            ex = annealed_prob(model, k, n, "p_zero", P.get("R_exact", P["R"]), seed=seed + 1, workers=workers)
            q = 1.0 - ex.estimate
            # binomial error at the exact survival probability; the sample one vanishes once every path survives
            se = math.sqrt(q * (1 - q) / P["R"] + ex.std_error**2)
            z = abs(t.phi[a, b].real - q) / se if se > 0 else (0.0 if t.phi[a, b].real == q else math.inf)
            worst = max(worst, z)
            rows.append(("phi", "one_minus_p_zero", n, q, ex.std_error))
        m["max_z_phi0"] = worst
        ok &= worst <= 3
    return Outcome(rows, bool(ok), m)


def _exp_renewal(model, P, seed, workers):
    ly = P["log_y"] if isinstance(P["log_y"], list) else [P["log_y"]]
    r = stats.renewal_count(model, P["k"], ly, P["B"], P["C"], P.get("n_max"), P["R"], seed, workers)
    tol = P.get("rel_tol", 0.05)
    errs = [abs(e - r.target) / r.target for e in r.estimates]
    rows = r.rows("renewal") + [("renewal", "target", "", r.target, "")]
    m = {"target": r.target, "n_max": r.n_max, "criterion": r.criterion, "rel_errors": errs, "lattice_flag": r.lattice_flag, "oscillation": r.oscillation}
    if P.get("expect_oscillation"):
        # lattice demonstration: per-y counts must oscillate instead of settling
        return Outcome(rows, r.lattice_flag and r.oscillation > 0, m)
    return Outcome(rows, max(errs) <= tol, m)


def _exp_delta(model, P, seed, workers):
    ns = [int(n) for n in P["n_list"]]
    rp = [tuple(x) for x in P.get("rp", [[P.get("r", 0), P.get("p", 2)]])]
    rows, m, ok = [], {}, True
    for r, p in rp:
        vals = []
        for n in ns:
            d = delta_records(model, P["k"], n, P["R"], p, r, seed, workers)
            est, se = d.weighted_dev
            vals.append(est)
            rows.append(("delta", f"weighted_dev[r={r:g},p={p:g}]", n, est, se))
            rows.append(("delta", f"abs_log_delta[r={r:g},p={p:g}]", n, d.abs_log_delta[0], d.abs_log_delta[1]))
        good = all(b < a for a, b in zip(vals, vals[1:]))
        m[f"r={r:g},p={p:g}"] = {"estimates": vals, "pass": good}
        ok &= good
    return Outcome(rows, bool(ok), m)


def _exp_minima(model, P, seed, workers):
    from .rwalk import truncated_log_means

    a = P.get("a", 10)
    mean_bar = float(model.weights @ truncated_log_means(model, a))
    drift = P["eps_drift"] if "eps_drift" in P else P.get("eps_drift_frac", 0.5) * mean_bar
    res = [
        minima_density_check(model, a, drift, int(n), P["R"], seed, P.get("eps"), P.get("eps_fraction", 0.5), P.get("horizon_factor", 4))
        for n in P["n_list"]
    ]
    rows = [("minima", "tail_probability", r.n, r.probability, r.std_error) for r in res]
    probs = [r.probability for r in res]
    ok = all(b < a_ for a_, b in zip(probs, probs[1:]))
    m = {"probabilities": probs, "eps": [r.eps for r in res], "eps_drift": drift, "note": res[0].note}
    return Outcome(rows, bool(ok), m)


def _exp_exactlaw(model, P, seed, workers):
    n, k = int(P["n"]), int(P["k"])
    env = sample_env(model, n, seed)
    if P.get("method", "series") == "dft":
        law = quenched_law_dft(env, k, int(P.get("M", 1024)))
    else:
        law = quenched_law_series(env, k, P.get("K"))
    direct = float(np.real(quenched_eval(env, k, 0.0)))
    gap = abs(law.coeffs[0] - direct)
    total = float(law.coeffs.sum()) + law.tail_mass
    if law.method == "SeriesComposition":
        ok = gap <= 1e-10 and abs(total - 1) <= 1e-9
    else:
        ok = gap <= 1e-10 + law.tail_mass
    m = {"p_zero": float(law.coeffs[0]), "p_zero_direct": direct, "tail_mass": law.tail_mass, "K": law.K, "method": law.method}
    return Outcome([], bool(ok), m, law)


REGISTRY: dict[str, Experiment] = {
    "decay": Experiment(_exp_decay, ("n_list", "R")),
    "extinction": Experiment(_exp_extinction, ("k", "n_list", "R")),
    "lowerdev": Experiment(_exp_lowerdev, ("k", "n_list", "R"), (("theta", "theta_over_mu"),)),
    "harmonic": Experiment(_exp_harmonic, ("k", "alpha", "n_list", "R")),
    "logmoment": Experiment(_exp_logmoment, ("k", "j_power", "n_list", "R")),
    "clt": Experiment(_exp_clt, ("k", "n_list", "R")),
    "edgeworth": Experiment(_exp_edgeworth, ("k", "n_list", "n", "R")),
    "phi": Experiment(_exp_phi, ("k", "s_list", "n_list", "R")),
    "renewal": Experiment(_exp_renewal, ("k", "log_y", "B", "C", "R")),
    "delta": Experiment(_exp_delta, ("k", "n_list", "R")),
    "minima": Experiment(_exp_minima, ("n_list", "R")),
    "exactlaw": Experiment(_exp_exactlaw, ("k", "n")),
}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@dataclass
class RunSettings:
    out: str | None = None
    seed: int | None = None
    workers: int = 1
    force: bool = False


@dataclass
class VerdictRecord:
    name: str
    experiment: str
    config_hash: str
    passed: bool
    metrics: dict
    artifacts: list = field(default_factory=list)
    timestamp: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "experiment": self.experiment,
            "pass": self.passed,
            "config_hash": self.config_hash,
            "timestamp": self.timestamp,
            "seconds": self.seconds,
            "details": self.metrics,
            "artifacts": self.artifacts,
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    return x


def _resolve_out(cfg_out, settings: RunSettings) -> Path:
    out = settings.out or cfg_out or os.environ.get("BPIRE_OUT_DIR") or "bpire-out"
    return Path(out)


def run_config(cfg: dict, base: Path, settings: RunSettings) -> VerdictRecord:
    """Run one config object; raises ConfigError for unusable input."""
    if not isinstance(cfg, dict):
        raise ConfigError("a run config must be a JSON object")
    name = cfg.get("experiment")
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; registry: {', '.join(REGISTRY)}")
    exp = REGISTRY[name]
    params = cfg.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("'parameters' must be an object")
    _need(params, exp, name)
    seed = settings.seed if settings.seed is not None else cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("an integer 'seed' is mandatory")
    if "model" in cfg:
        model = model_from_document(cfg["model"], "inline model")
    elif "model_file" in cfg:
        model = load_model(base / cfg["model_file"])
    else:
        raise ConfigError("config needs 'model_file' or an inline 'model'")
    if not (settings.force or cfg.get("force", False)):
        rep = validate_assumptions(model, **{k: params.get(k, v) for k, v in DEFAULT_ASSUMPTIONS.items()})
        if not rep.required_ok:
            raise ConfigError(f"model fails {', '.join(rep.failures())}; rerun with --force to proceed anyway")
    try:
        chash = config_hash(name, model, params, seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"parameters are not canonical JSON: {exc}") from None
    label = cfg.get("name", name)
    out_dir = _resolve_out(cfg.get("out_dir"), settings)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    try:
        outcome = exp.run(model, params, seed, settings.workers)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad parameter for {name!r}: {exc}") from None
    seconds = time.perf_counter() - t0

    csv_path = out_dir / f"{label}.csv"
    if outcome.law is not None:
        outcome.law.to_csv(csv_path, f"config_hash={chash}")
    else:
        stats.write_long_csv(csv_path, outcome.rows, chash)
    rec = VerdictRecord(
        label,
        name,
        chash,
        bool(outcome.passed),
        _jsonable(outcome.metrics),
        [str(csv_path)],
        time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        round(seconds, 3),
    )
    json_path = out_dir / f"{label}.json"
    rec.artifacts.append(str(json_path))
    json_path.write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")
    return rec


def cmd_validate(args) -> int:
    try:
        model = load_model(args.model)
        rep = validate_assumptions(model, args.delta, args.p, args.q)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    doc = _jsonable(rep.to_dict())
    doc["failures"] = rep.failures()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if rep.failures():
        print("failed: " + ", ".join(rep.failures()), file=sys.stderr)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "validate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_PASS if rep.required_ok else EXIT_FAIL


def _settings(args) -> RunSettings:
    return RunSettings(args.out, args.seed, args.workers, args.force)


def cmd_run(args) -> int:
    try:
        cfg = read_json(args.config)
        rec = run_config(cfg, Path(args.config).parent, _settings(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{rec.name}: {'PASS' if rec.passed else 'FAIL'} ({rec.experiment}, {rec.seconds:.1f}s, hash {rec.config_hash[:12]})")
    return EXIT_PASS if rec.passed else EXIT_FAIL


def run_suite(suite_path, settings: RunSettings) -> list[tuple[str, str, str, float]]:
    doc = read_json(suite_path)
    base = Path(suite_path).parent
    entries = doc.get("configs", []) if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ConfigError("a suite is a list of configs or an object with a 'configs' list")
    table = []
    for i, entry in enumerate(entries):
        cfg_base = base
        try:
            if isinstance(entry, str):
                cfg_base = (base / entry).parent
                entry = read_json(base / entry)
            rec = run_config(entry, cfg_base, settings)
            row = (rec.name, rec.experiment, "PASS" if rec.passed else "FAIL", rec.seconds)
        except ConfigError as exc:
            label = entry.get("name", entry.get("experiment", f"#{i}")) if isinstance(entry, dict) else f"#{i}"
            row = (str(label), "?", f"ERROR: {exc}", 0.0)
        print(f"{row[0]:<28} {row[1]:<11} {row[2]} {row[3]:.1f}s", flush=True)
        table.append(row)
    return table


def cmd_suite(args) -> int:
    try:
        table = run_suite(args.config, _settings(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    failed = sum(1 for r in table if r[2] != "PASS")
    print(f"{len(table) - failed}/{len(table)} passed")
    return min(failed, 125)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpire", description="Branching processes with immigration in random environment.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check the standing assumptions on a model file")
    v.add_argument("--model", required=True)
    v.add_argument("--delta", type=float, default=DEFAULT_ASSUMPTIONS["delta"])
    v.add_argument("--p", type=float, default=DEFAULT_ASSUMPTIONS["p"])
    v.add_argument("--q", type=float, default=DEFAULT_ASSUMPTIONS["q"])
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate)

    for name, func, helptext in (("run", cmd_run, "run one experiment config"), ("suite", cmd_suite, "run a suite of configs")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--config", required=True)
        r.add_argument("--out")
        r.add_argument("--seed", type=int)
        r.add_argument("--workers", type=int, default=1)
        r.add_argument("--force", action="store_true")
        r.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
