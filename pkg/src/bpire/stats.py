"""Verification experiments: decay-rate fits, survival-conditioned laws, renewal counts.

Probabilities reachable by the exact quenched engine are computed by
conditional Monte Carlo over environments; only pathwise functionals are
simulated. Every experiment returns a record that can be flattened into
long-format CSV rows ``(experiment, parameter, n_or_y, estimate, std_error)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import ndtr

from .env_model import EnvironmentModel, EnvPath, validate_assumptions
from .pgf_engine import (
    AnnealedEstimate,
    annealed_prob,
    batch_laws,
    env_indices,
    quenched_law_dft,
    summarize,
)
from .rwalk import EdgeworthSpec, edgeworth_G3, lam, walk_stats
from .seeding import AUX
from .simulator import simulate_batch, simulate_paths


class DegenerateFitError(ValueError):
    """The input cannot be fitted on the log scale (zeros, too few points, no spread)."""


class NonConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# weighted log-linear fits
# ---------------------------------------------------------------------------


@dataclass
class DecayFit:
    points: list  # (n, log p, err on log p)
    slope: float
    intercept: float
    r_squared: float
    slope_se: float
    intercept_se: float
    birge: float = 1.0  # sqrt(chi2 / dof), folded into the standard errors when > 1
    range_fit: "DecayFit | None" = None
    label: str = ""

    def upper(self, level: float = 0.99) -> float:
        """One-sided upper confidence bound on the slope."""
        return self.slope + float(sps.norm.ppf(level)) * self.slope_se

    def agrees_with(self, other: "DecayFit", nsigma: float = 3.0) -> bool:
        return abs(self.slope - other.slope) <= nsigma * math.hypot(self.slope_se, other.slope_se)

    def rows(self, experiment: str) -> list:
        out = [(experiment, f"log_p[{self.label}]", n, lp, e) for n, lp, e in self.points]
        out.append((experiment, f"slope[{self.label}]", "", self.slope, self.slope_se))
        out.append((experiment, f"intercept[{self.label}]", "", self.intercept, self.intercept_se))
        out.append((experiment, f"r_squared[{self.label}]", "", self.r_squared, ""))
        if self.range_fit is not None:
            out.extend(self.range_fit.rows(experiment))
        return out


def fit_log_linear(ns, values, std_errors=None, label: str = "") -> DecayFit:
    """Weighted least squares of log(values) on n with weights 1/err^2.

    ``err = std_error / value`` (delta method). Points without an error bar
    are fitted unweighted. When the residual chi-square per degree of freedom
    exceeds one, standard errors are scaled by its square root so that a
    misspecified straight line does not claim more precision than its scatter.
    """
    ns = np.asarray(ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if ns.size != v.size:
        raise ValueError("n and values differ in length")
    if ns.size < 3:
        raise DegenerateFitError("need at least three points")
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise DegenerateFitError("estimates must be finite and strictly positive on the log scale")
    if np.ptp(ns) == 0:
        raise DegenerateFitError("all points share one n")
    y = np.log(v)
    if std_errors is None:
        err = np.ones_like(y)
        known = False
    else:
        err = np.asarray(std_errors, dtype=float) / v
        known = bool(np.any(err > 0))
        if known:
            err = np.where(err > 0, err, err[err > 0].min())
        else:
            err = np.ones_like(y)
    w = 1.0 / err**2
    X = np.column_stack([ns, np.ones_like(ns)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    dof = ns.size - 2
    chi2 = float(np.sum(w * resid**2))
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    if known:
        birge = max(1.0, math.sqrt(chi2 / dof))
        cov = cov * birge**2
    else:
        birge = 1.0
        cov = cov * chi2 / dof
    ybar = float(np.sum(w * y) / np.sum(w))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    r2 = min(1.0, max(0.0, r2))
    pts = [(int(n) if float(n).is_integer() else float(n), float(a), float(e) if known else 0.0) for n, a, e in zip(ns, y, err)]
    return DecayFit(pts, float(coef[0]), float(coef[1]), r2, math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1]), birge, label=label)


def _window(n_list, min_n: int) -> list[int]:
    ns = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_list must be strictly increasing")
    kept = [n for n in ns if n >= min_n]
    if len(kept) < 3:
        raise DegenerateFitError(f"fewer than three n >= {min_n} in n_list")
    return kept


def _fit_estimates(ns, ests: Sequence[AnnealedEstimate], label: str) -> DecayFit:
    vals = [e.estimate for e in ests]
    if all(v == 0 for v in vals):
        raise DegenerateFitError(f"{label}: every estimate is zero (degenerate input)")
    return fit_log_linear(ns, vals, [e.std_error for e in ests], label)


# ---------------------------------------------------------------------------
# small values, extinction, lower deviations
# ---------------------------------------------------------------------------


def default_kn(n: int) -> int:
    return max(1, math.ceil(math.log(n)))


def decay_rate(
    model: EnvironmentModel,
    k: int,
    j: int,
    n_list,
    R: int,
    seed: int,
    kn: Callable[[int], int] | None = default_kn,
    min_n: int = 5,
    workers: int = 1,
) -> DecayFit:
    """Fit of log P_k(Z_n = j) against n, plus the range event 1 <= Z_n <= k_n.

    Both events are read off the same exact quenched laws, one environment
    sample per n.
    """
    ns = _window(n_list, min_n)
    at, rng_ests = [], []
    for n in ns:
        t = kn(n) if kn is not None else 0
        K = max(j, t, 1)
        idx = env_indices(model, n, R, seed, n)
        coeffs = batch_laws(model, idx, [k], K, workers)[k]
        at.append(AnnealedEstimate(*summarize(coeffs[:, j]), R, ("p_at", j)))
        if kn is not None:
            rng_ests.append(AnnealedEstimate(*summarize(coeffs[:, 1 : t + 1].sum(axis=1)), R, ("p_range", t)))
    fit = _fit_estimates(ns, at, f"k={k},j={j}")
    if kn is not None:
        fit.range_fit = _fit_estimates(ns, rng_ests, f"k={k},range")
    return fit


@dataclass
class SuperMultRow:
    n: int
    m: int
    lhs: float
    rhs: float
    std_error: float
    passed: bool


def supermultiplicativity_check(model: EnvironmentModel, pairs, R: int, seed: int, workers: int = 1) -> list[SuperMultRow]:
    """P_1(Z_{n+m} = 1) >= P_1(Z_n = 1) P_1(Z_m = 1) within three combined standard errors."""
    need = sorted({x for n, m in pairs for x in (n, m, n + m)})
    est = {x: annealed_prob(model, 1, x, ("p_at", 1), R, seed=seed, workers=workers, idx=env_indices(model, x, R, seed, x)) for x in need}
    out = []
    for n, m in pairs:
        a, b, c = est[n + m], est[n], est[m]
        if not all(np.isfinite([a.estimate, b.estimate, c.estimate])):
            raise DegenerateFitError("non-finite estimate")
        rhs = b.estimate * c.estimate
        se = math.sqrt(a.std_error**2 + (c.estimate * b.std_error) ** 2 + (b.estimate * c.std_error) ** 2)
        out.append(SuperMultRow(n, m, a.estimate, rhs, se, a.estimate >= rhs - 3 * se - 1e-15))
    return out


def extinction_decay(model: EnvironmentModel, k: int, n_list, R: int, seed: int, min_n: int = 5, workers: int = 1) -> DecayFit:
    ns = _window(n_list, min_n)
    ests = [
        annealed_prob(model, k, n, "p_zero", R, seed=seed, workers=workers, idx=env_indices(model, n, R, seed, n))
        for n in ns
    ]
    return _fit_estimates(ns, ests, f"k={k},zero")


def _hybrid_upper_part(model, idx, k, seed, key, K, fn, workers):
    """Per-environment E[fn(Z_n); Z_n > K | xi] from one simulated path in that environment."""
    n = idx.shape[1]
    bp = simulate_batch(model, idx, k, seed, key, record=[n], workers=workers)
    z, logz = bp.z[:, 0], bp.log_z[:, 0]
    above = (z > K) | (z < 0)
    out = np.zeros(len(z))
    out[above] = fn(z[above], logz[above])
    return out


@dataclass
class LowerDeviation:
    fit: DecayFit
    theta: float
    methods: dict  # n -> "exact" | "hybrid"


def lower_deviation(
    model: EnvironmentModel,
    k: int,
    theta: float,
    n_list,
    R: int,
    seed: int,
    K: int = 1024,
    min_n: int = 5,
    workers: int = 1,
) -> LowerDeviation:
    """Fit of log P_k(1 <= Z_n <= e^{theta n}).

    Thresholds up to ``K`` are exact; above it the part below ``K`` stays
    exact and the part in (K, e^{theta n}] comes from one simulated path per
    environment, which keeps the estimator unbiased.
    """
    mu = walk_stats(model).mu
    if not 0 < theta < mu:
        raise ValueError(f"theta must lie in (0, mu) = (0, {mu:.6g})")
    ns = _window(n_list, min_n)
    ests, methods = [], {}
    for n in ns:
        T = math.floor(math.exp(theta * n))
        idx = env_indices(model, n, R, seed, n)
        cut = max(1, min(T, K))
        coeffs = batch_laws(model, idx, [k], cut, workers)[k]
        vals = coeffs[:, 1 : cut + 1].sum(axis=1)
        if T > K:
            logT = theta * n

            def inside(z, logz):
                return (logz <= logT + 1e-12).astype(float)

            vals = vals + _hybrid_upper_part(model, idx, k, seed, (AUX, n), K, inside, workers)
            methods[n] = "hybrid"
        else:
            methods[n] = "exact"
        ests.append(AnnealedEstimate(*summarize(vals), R, ("p_range", T)))
    return LowerDeviation(_fit_estimates(ns, ests, f"k={k},theta={theta:.6g}"), theta, methods)


# ---------------------------------------------------------------------------
# harmonic and log moments
# ---------------------------------------------------------------------------


@dataclass
class HarmonicMoment:
    fit: DecayFit
    alpha: float
    mode: str
    brackets: dict = field(default_factory=dict)  # n -> (lower, upper) averaged over environments


def harmonic_bracket(coeffs: np.ndarray, alpha: float, tail: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic bounds on E[Z^-alpha; Z > 0 | xi] from coefficients 0..K and the tail mass."""
    coeffs = np.atleast_2d(coeffs)
    K = coeffs.shape[1] - 1
    j = np.arange(1, K + 1, dtype=float)
    lower = coeffs[:, 1:] @ j**-alpha
    return lower, lower + np.asarray(tail) * (K + 1.0) ** -alpha


def harmonic_moment(
    model: EnvironmentModel,
    k: int,
    alpha: float,
    n_list,
    R: int,
    seed: int,
    K: int = 128,
    mode: str = "hybrid",
    n0: int | None = None,
    min_n: int = 5,
    workers: int = 1,
) -> HarmonicMoment:
    """Fit of log E_k[Z_n^-alpha; Z_n > 0] (or the floor-constrained variant).

    ``mode="bracket"`` uses the midpoint of the deterministic bracket and
    fails when the bracket is wider than 10% of its lower end.
    ``mode="hybrid"`` adds one simulated path per environment for Z_n > K.
    ``mode="constrained"`` simulates E_k[Z_n^-alpha; Z_1 >= n0, ..., Z_n >= n0].
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mode not in ("bracket", "hybrid", "constrained"):
        raise ValueError(f"unknown mode {mode!r}")
    ns = _window(n_list, min_n)
    ests, brackets = [], {}
    for n in ns:
        idx = env_indices(model, n, R, seed, n)
        if mode == "constrained":
            if n0 is None or n0 < 1:
                raise ValueError("constrained mode needs a floor n0 >= 1")
            bp = simulate_batch(model, idx, k, seed, (AUX, n), record=range(1, n + 1), workers=workers)
            ok = np.all((bp.z >= n0) | (bp.z < 0), axis=1)
            vals = np.where(ok, np.exp(-alpha * bp.log_z[:, -1]), 0.0)
        else:
            coeffs = batch_laws(model, idx, [k], K, workers)[k]
            tail = np.clip(1.0 - coeffs.sum(axis=1), 0.0, None)
            lo, hi = harmonic_bracket(coeffs, alpha, tail)
            brackets[n] = (float(lo.mean()), float(hi.mean()))
            if mode == "bracket":
                if hi.mean() - lo.mean() > 0.1 * lo.mean():
                    raise DegenerateFitError(f"bracket too wide at n={n}: tail dominates; raise K or use hybrid mode")
                vals = (lo + hi) / 2
            else:
                vals = lo + _hybrid_upper_part(
                    model, idx, k, seed, (AUX, n), K, lambda z, logz: np.exp(-alpha * logz), workers
                )
        ests.append(AnnealedEstimate(*summarize(vals), R, ("harmonic", alpha)))
    return HarmonicMoment(_fit_estimates(ns, ests, f"k={k},alpha={alpha:g}"), alpha, mode, brackets)


@dataclass
class LogMomentSeries:
    n_list: list
    estimates: list
    std_errors: list
    j_power: int
    decreases: int
    comparisons: int
    sign_p_value: float
    decreasing: bool

    def rows(self, experiment: str) -> list:
        return [(experiment, f"log_moment[j={self.j_power}]", n, e, s) for n, e, s in zip(self.n_list, self.estimates, self.std_errors)]


def sign_test(values) -> tuple[int, int, float]:
    """One-sided sign test for a decreasing sequence: (#decreases, #pairs, p-value)."""
    d = np.diff(np.asarray(values, dtype=float))
    d = d[d != 0]
    down = int(np.sum(d < 0))
    return down, int(d.size), float(sps.binom.sf(down - 1, d.size, 0.5)) if d.size else 1.0


def log_moment_on_extinction_step(
    model: EnvironmentModel,
    k: int,
    j_power: int,
    n_list,
    R: int,
    seed: int,
    K: int = 64,
    level: float = 0.01,
    workers: int = 1,
) -> LogMomentSeries:
    """E_k[(log Z_n)^j; Z_{n+1} = 0, Z_n > 0] by conditional Monte Carlo.

    Given the environment, P(Z_{n+1} = 0 | Z_n = z) = f_{n+1}(0)^z h_{n+1}(0),
    so each environment contributes sum_z P(Z_n = z | xi) (log z)^j f_{n+1}(0)^z h_{n+1}(0).
    Truncating at ``K`` drops at most max f(0)^(K+1) (log of the largest count)^j per unit tail mass.
    """
    if j_power < 0:
        raise ValueError("j_power must be >= 0")
    ns = [int(n) for n in n_list]
    f0 = np.array([float(a.offspring.pgf(0.0).real) for a in model.atoms])
    h0 = np.array([float(a.immigration.pgf(0.0).real) for a in model.atoms])
    z = np.arange(1, K + 1, dtype=float)
    logw = np.log(z) ** j_power if j_power > 0 else np.ones_like(z)
    ests, ses = [], []
    for n in ns:
        idx = env_indices(model, n + 1, R, seed, n)
        coeffs = batch_laws(model, idx[:, :n], [k], K, workers)[k]
        last = idx[:, n]
        with np.errstate(divide="ignore"):
            lf0 = np.where(f0[last] > 0, np.log(f0[last]), -np.inf)
        kill = np.exp(np.outer(lf0, z))
        vals = h0[last] * np.sum(coeffs[:, 1:] * kill * logw, axis=1)
        e, s = summarize(vals)
        ests.append(e)
        ses.append(s)
    down, m, p = sign_test(ests)
    return LogMomentSeries(ns, ests, ses, j_power, down, m, p, p < level)


# ---------------------------------------------------------------------------
# survival-conditioned laws of log Z_n
# ---------------------------------------------------------------------------


@dataclass
class KSReport:
    n_samples: int
    ks_stat: float
    target: str
    n: int | None = None
    attempts: int = 1


def ks_statistic(sample, cdf: Callable) -> float:
    """Two-sided Kolmogorov-Smirnov distance with the right-continuous empirical CDF."""
    x = np.sort(np.asarray(sample, dtype=float))
    R = x.size
    if R == 0:
        raise ValueError("empty sample")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, R + 1)
    return float(max(np.max(i / R - F), np.max(F - (i - 1) / R), 0.0))


def survivor_logs(
    model: EnvironmentModel, k: int, n: int, R: int, seed: int, workers: int = 1, max_attempts: int = 20
) -> tuple[np.ndarray, int]:
    """log Z_n on at least ``R`` surviving annealed paths; batches are redrawn until met."""
    logs = []
    have, attempts, batch = 0, 0, R
    while have < R:
        if attempts >= max_attempts:
            raise RuntimeError(f"survivor shortfall: {have} of {R} after {attempts} batches")
        bp = simulate_paths(model, k, n, batch, seed, key=(n, attempts), record=[n], workers=workers)
        lz = bp.log_z[:, 0]
        lz = lz[np.isfinite(lz)]
        logs.append(lz)
        have += lz.size
        attempts += 1
        rate = max(have / (attempts * batch), 1e-3) if have else 1e-3
        batch = int(min(50 * R, math.ceil((R - have) / rate * 1.1) + 16))
    return np.concatenate(logs), attempts


def standardize(logz: np.ndarray, n: int, model: EnvironmentModel) -> np.ndarray:
    st = walk_stats(model)
    if st.sigma2 <= 0:
        raise ValueError("degenerate walk: sigma2 = 0")
    return (logz - n * st.mu) / (math.sqrt(n) * st.sigma)


def clt_test(model: EnvironmentModel, k: int, n: int, R: int, seed: int, workers: int = 1) -> KSReport:
    if walk_stats(model).sigma2 <= 0:
        raise ValueError("degenerate walk: sigma2 = 0")
    logs, attempts = survivor_logs(model, k, n, R, seed, workers)
    x = standardize(logs, n, model)
    return KSReport(x.size, ks_statistic(x, ndtr), "NormalCDF", n, attempts)


@dataclass
class ShiftEstimate:
    b: float
    std_error: float
    residual_slope: float
    residual_slope_se: float
    per_n: list  # (n, mean of log Z_n - n mu, se)
    k: int


def estimate_shift(
    model: EnvironmentModel, k: int, n_list, R: int, seed: int, tail: int | None = None, workers: int = 1
) -> ShiftEstimate:
    """Limit of E[log Z_n | Z_n > 0] - n mu, fitted as a constant over the largest n's.

    Raises NonConvergenceError when the residual slope over those n is
    more than three standard errors from zero.
    """
    ns = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_list must be strictly increasing")
    mu = walk_stats(model).mu
    per_n = []
    for n in ns:
        logs, _ = survivor_logs(model, k, n, R, seed, workers)
        e, s = summarize(logs - n * mu)
        per_n.append((n, e, s))
    use = per_n[-(tail or max(2, (len(per_n) + 1) // 2)) :]
    m = np.array([e for _, e, _ in use])
    s = np.array([v for _, _, v in use])
    if np.all(s == 0):
        b, b_se, slope, slope_se = float(m.mean()), 0.0, 0.0, 0.0
    else:
        w = 1 / np.maximum(s, s[s > 0].min()) ** 2
        b = float(np.sum(w * m) / np.sum(w))
        b_se = float(1 / math.sqrt(np.sum(w)))
        if len(use) >= 2:
            x = np.array([n for n, _, _ in use], dtype=float)
            X = np.column_stack([x, np.ones_like(x)])
            cov = np.linalg.inv(X.T @ (X * w[:, None]))
            coef = cov @ (X.T @ (w * m))
            slope, slope_se = float(coef[0]), float(math.sqrt(cov[0, 0]))
        else:
            slope, slope_se = 0.0, float("inf")
    if slope_se > 0 and abs(slope) > 3 * slope_se:
        raise NonConvergenceError(f"residual slope {slope:.3g} +- {slope_se:.2g} is not consistent with zero")
    return ShiftEstimate(b, b_se, slope, slope_se, per_n, k)


EDGEWORTH_GRID = np.round(np.arange(-4.0, 4.0 + 1e-9, 0.01), 10)


def sup_distance(sample, cdf: Callable, grid=EDGEWORTH_GRID) -> float:
    """sup over a grid of |F_hat(x) - cdf(x)|, F_hat right-continuous."""
    x = np.sort(np.asarray(sample, dtype=float))
    Fh = np.searchsorted(x, grid, side="right") / x.size
    return float(np.max(np.abs(Fh - cdf(grid))))


@dataclass
class EdgeworthRow:
    n: int
    D_g3: float
    D_phi: float
    n_samples: int

    @property
    def scaled_g3(self) -> float:
        return math.sqrt(self.n) * self.D_g3

    @property
    def scaled_phi(self) -> float:
        return math.sqrt(self.n) * self.D_phi


def edgeworth_test(
    model: EnvironmentModel, k: int, n_list, R: int, seed: int, shift_b: float, workers: int = 1
) -> list[EdgeworthRow]:
    spec = EdgeworthSpec(walk_stats(model), shift_b)
    out = []
    for n in n_list:
        logs, _ = survivor_logs(model, k, int(n), R, seed, workers)
        x = standardize(logs, int(n), model)
        out.append(EdgeworthRow(int(n), sup_distance(x, lambda g: edgeworth_G3(g, int(n), spec)), sup_distance(x, ndtr), x.size))
    return out


@dataclass
class ExactSmallN:
    n: int
    D_g3: float
    D_phi: float
    R: int
    M: int
    max_tail: float


def edgeworth_exact_small_n(
    model: EnvironmentModel, k: int, shift_b: float, R: int, seed: int, n: int = 6, M: int = 4096
) -> ExactSmallN:
    """Annealed law of log Z_n given survival from exact DFT laws, compared on the same grid."""
    idx = env_indices(model, n, R, seed, n)
    st = walk_stats(model)
    acc = np.zeros(M)
    tails = []
    for row in idx:
        law = quenched_law_dft(EnvPath.from_indices(model, row), k, M)
        acc += np.clip(law.coeffs, 0.0, None)
        tails.append(law.tail_mass)
    acc /= R
    surv = acc[1:].sum()
    j = np.arange(1, M)
    xj = (np.log(j) - n * st.mu) / (math.sqrt(n) * st.sigma)
    cdf_at = np.cumsum(acc[1:]) / surv
    pos = np.searchsorted(xj, EDGEWORTH_GRID, side="right")
    Fh = np.where(pos > 0, cdf_at[np.maximum(pos - 1, 0)], 0.0)
    spec = EdgeworthSpec(st, shift_b)
    return ExactSmallN(
        n,
        float(np.max(np.abs(Fh - edgeworth_G3(EDGEWORTH_GRID, n, spec)))),
        float(np.max(np.abs(Fh - ndtr(EDGEWORTH_GRID)))),
        R,
        M,
        float(max(tails)),
    )


# ---------------------------------------------------------------------------
# phi_{k,n}(s) = E_k[Z_n^{is}; Z_n > 0] / lambda(s)^n
# ---------------------------------------------------------------------------


@dataclass
class PhiTable:
    s_list: list
    n_list: list
    phi: np.ndarray  # (len(s), len(n)) complex
    phi_se: np.ndarray
    diff: np.ndarray  # coupled estimate of phi_{n+1} - phi_n, (len(s), len(n))
    diff_se: np.ndarray
    raw_diff: np.ndarray  # difference of the two marginal estimates
    slopes: dict  # s -> DecayFit of |diff| over n

    def rows(self, experiment: str) -> list:
        out = []
        for a, s in enumerate(self.s_list):
            for b, n in enumerate(self.n_list):
                out.append((experiment, f"re_phi[s={s:g}]", n, float(self.phi[a, b].real), float(self.phi_se[a, b])))
                out.append((experiment, f"im_phi[s={s:g}]", n, float(self.phi[a, b].imag), float(self.phi_se[a, b])))
                out.append((experiment, f"abs_diff[s={s:g}]", n, float(abs(self.diff[a, b])), float(self.diff_se[a, b])))
        return out


def _cis(s: float, x: np.ndarray) -> np.ndarray:
    # exact conjugate symmetry in s
    return np.cos(abs(s) * x) + 1j * math.copysign(1.0, s) * np.sin(abs(s) * x)


def _cmean(v: np.ndarray) -> tuple[complex, float]:
    R = v.size
    m = complex(v.mean())
    se = math.sqrt((np.var(v.real, ddof=1) + np.var(v.imag, ddof=1)) / R) if R > 1 else float("nan")
    return m, se


def phi_convergence(
    model: EnvironmentModel,
    k: int,
    s_list,
    n_list,
    R: int,
    seed: int,
    min_lambda_power: float = 0.1,
    workers: int = 1,
) -> PhiTable:
    """phi_{k,n}(s) on one batch of annealed paths, with coupled successive differences.

    The coupled difference subtracts the mean-zero control
    1{Z_n>0} Z_n^{is} lambda^{-n} (m_{n+1}^{is}/lambda - 1), which leaves
    Z_n^{is} m_{n+1}^{is} lambda^{-n-1} (Delta_n^{is} - 1) on joint survival.
    """
    ns = [int(n) for n in n_list]
    n_max = max(ns)
    for s in s_list:
        if abs(lam(model, s)) ** (n_max + 1) < min_lambda_power:
            raise ValueError(f"|lambda({s})|^{n_max + 1} is below {min_lambda_power}: noise would be amplified")
    gens = sorted(set(ns) | {n + 1 for n in ns})
    idx = env_indices(model, n_max + 1, R, seed)
    bp = simulate_batch(model, idx, k, seed, record=gens, workers=workers)
    logm = model.log_means
    S, N = len(s_list), len(ns)
    phi = np.empty((S, N), complex)
    phi_se = np.empty((S, N))
    diff = np.empty((S, N), complex)
    diff_se = np.empty((S, N))
    raw = np.empty((S, N), complex)
    for a, s in enumerate(s_list):
        ls = complex(lam(model, s))
        for b, n in enumerate(ns):
            L0, L1 = bp.logz_at(n), bp.logz_at(n + 1)
            a0, a1 = np.isfinite(L0), np.isfinite(L1)
            x = logm[idx[:, n]]
            v0 = np.where(a0, _cis(s, np.where(a0, L0, 0.0)), 0) / ls**n
            v1 = np.where(a1, _cis(s, np.where(a1, L1, 0.0)), 0) / ls ** (n + 1)
            phi[a, b], phi_se[a, b] = _cmean(v0)
            raw[a, b] = _cmean(v1)[0] - phi[a, b]
            ctrl = v0 * (_cis(s, x) / ls - 1)
            d, diff_se[a, b] = _cmean(v1 - v0 - ctrl)
            diff[a, b] = d
    slopes = {}
    for a, s in enumerate(s_list):
        if s == 0:
            continue
        slopes[s] = fit_log_linear(ns, np.abs(diff[a]), None, f"s={s:g}")
    return PhiTable(list(s_list), ns, phi, phi_se, diff, diff_se, raw, slopes)


# ---------------------------------------------------------------------------
# renewal counts
# ---------------------------------------------------------------------------


def traversal_horizon(model: EnvironmentModel, C: float, log_y_max: float, n_cap: int = 100_000) -> int:
    """Smallest n with C + log y + 6 sigma sqrt(n) < n mu."""
    st = walk_stats(model)
    if st.mu <= 0:
        raise ValueError("walk does not drift upward")
    for n in range(1, n_cap + 1):
        if C + log_y_max + 6 * st.sigma * math.sqrt(n) < n * st.mu:
            return n
    raise ValueError("no traversal horizon below the cap")


@dataclass
class RenewalResult:
    log_y: list
    estimates: list
    std_errors: list
    target: float
    n_max: int
    criterion: str
    lattice_flag: bool
    oscillation: float  # max - min of per-y estimates

    def rows(self, experiment: str) -> list:
        return [(experiment, "visits", ly, e, s) for ly, e, s in zip(self.log_y, self.estimates, self.std_errors)]


def visit_counts(log_z: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """#{n : lo <= log Z_n <= hi} per row; extinct entries (-inf) never count."""
    return np.count_nonzero((log_z >= lo) & (log_z <= hi), axis=1)


def renewal_count(
    model: EnvironmentModel,
    k: int,
    log_y_list,
    B: float,
    C: float,
    n_max: int | None,
    R: int,
    seed: int,
    workers: int = 1,
) -> RenewalResult:
    """E_k #{n <= n_max : e^B y <= Z_n <= e^C y} against (C - B) / mu, for each log y."""
    if not 0 <= B <= C:
        raise ValueError("need 0 <= B <= C")
    st = walk_stats(model)
    ly = [float(v) for v in log_y_list]
    ly_max = max(ly)
    lhs = C + ly_max + 6 * st.sigma * math.sqrt(n_max) if n_max else None
    if n_max is None:
        n_max = traversal_horizon(model, C, ly_max)
        lhs = C + ly_max + 6 * st.sigma * math.sqrt(n_max)
    crit = f"C + log y_max + 6 sigma sqrt(n_max) = {lhs:.4f} < n_max mu = {n_max * st.mu:.4f}"
    if not lhs < n_max * st.mu:
        raise ValueError(f"window not traversed by the horizon: {crit} fails")
    bp = simulate_paths(model, k, n_max, R, seed, record=range(1, n_max + 1), workers=workers)
    ests, ses = [], []
    for v in ly:
        e, s = summarize(visit_counts(bp.log_z, B + v, C + v).astype(float))
        ests.append(e)
        ses.append(s)
    osc = max(ests) - min(ests)
    se_max = max(ses) if ses else 0.0
    nonlattice = validate_assumptions(model, 0.5, 2.0, 2.0).nonlattice_plausible.holds
    flag = (not nonlattice) or (len(ly) > 1 and osc > 6 * se_max + 1e-12)
    return RenewalResult(ly, ests, ses, (C - B) / st.mu, n_max, crit, flag, osc)


# ---------------------------------------------------------------------------
# output records
# ---------------------------------------------------------------------------

CSV_HEADER = ("experiment", "parameter", "n_or_y", "estimate", "std_error")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_long_csv(path, rows, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        fh.write(f"# config_hash={config_hash}\n")
