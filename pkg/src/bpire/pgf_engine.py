"""Exact quenched law of Z_n given an environment.

Given xi, the p.g.f. of Z_n started from k individuals is

    g_n(k, s) = f_{0,n}(s)**k * prod_{i=1..n} h_i(f_{i,n}(s)),
    f_{i,n} = f_{i+1} o ... o f_n,   f_{n,n}(s) = s.

Three independent routes are provided: truncated power-series composition
(exact coefficients up to the cutoff K), inverse DFT of point evaluations on
the unit circle, and a closed form for linear-fractional environments.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .env_model import EnvironmentModel, EnvPath, Finite, LinearFractional, PointMass, Poisson, sample_atom_indices
from .seeding import ENV, chunks, stream

NEG_TOL = 1e-12
DEFAULT_K = 1024
MAX_K = 1 << 16
ADAPTIVE_TAIL = 1e-8


class SeriesBreakdown(ArithmeticError):
    """Series arithmetic produced non-finite or clearly negative coefficients."""


class QueryError(ValueError):
    """A law query asked for coefficients the law does not carry."""


# ---------------------------------------------------------------------------
# truncated series kernels; arrays are (rows, K+1), one series per row
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _mul(a, b):
    R, L = a.shape
    out = np.zeros((R, L))
    for r in range(R):
        for i in range(L):
            ai = a[r, i]
            if ai == 0.0:
                continue
            for j in range(L - i):
                out[r, i + j] += ai * b[r, j]
    return out


@numba.njit(cache=True, nogil=True)
def _exp_poisson(t, m):
    """exp(m (t - 1)) via the O(K^2) recurrence E_j = (1/j) sum_i i u_i E_{j-i}."""
    R, L = t.shape
    out = np.zeros((R, L))
    iu = np.empty(L)
    for r in range(R):
        for i in range(1, L):
            iu[i] = i * m * t[r, i]
        out[r, 0] = 1.0
        for j in range(1, L):
            acc = 0.0
            for i in range(1, j + 1):
                acc += iu[i] * out[r, j - i]
            out[r, j] = acc / j
        c = math.exp(m * (t[r, 0] - 1.0))
        for j in range(L):
            out[r, j] *= c
    return out


@numba.njit(cache=True, nogil=True)
def _lf_compose(t, a, b):
    """a + (1-a)(1-b) g with g = t / (1 - b t), from g (1 - b t0) = t_j + b sum_{i>=1} t_i g_{j-i}."""
    R, L = t.shape
    out = np.empty((R, L))
    g = np.empty(L)
    c = (1.0 - a) * (1.0 - b)
    for r in range(R):
        d0 = 1.0 - b * t[r, 0]
        for j in range(L):
            acc = t[r, j]
            for i in range(1, j + 1):
                acc += b * t[r, i] * g[j - i]
            g[j] = acc / d0
        out[r, 0] = a + c * g[0]
        for j in range(1, L):
            out[r, j] = c * g[j]
    return out


def _power(t: np.ndarray, k: int) -> np.ndarray:
    result = np.zeros_like(t)
    result[:, 0] = 1.0
    base = t
    while k:
        if k & 1:
            result = _mul(result, base)
        k >>= 1
        if k:
            base = _mul(base, base)
    return result


def _horner(coeffs: Sequence[float], t: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(t)
    for c in reversed(coeffs):
        acc = _mul(acc, t)
        acc[:, 0] += c
    return acc


def compose(spec, t: np.ndarray) -> np.ndarray:
    """Truncated series of ``spec(t(s))``; ``t`` has nonnegative coefficients."""
    if isinstance(spec, Poisson):
        return _exp_poisson(t, spec.m)
    if isinstance(spec, LinearFractional):
        return _lf_compose(t, spec.a, spec.b)
    if isinstance(spec, PointMass):
        return _power(t, spec.j)
    if isinstance(spec, Finite):
        return _horner(spec.probabilities, t)
    raise TypeError(f"unsupported spec {spec!r}")


def _check(series: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(series)):
        raise SeriesBreakdown(f"non-finite coefficients in {what}")
    lo = series.min(initial=0.0)
    if lo < -NEG_TOL:
        raise SeriesBreakdown(f"negative coefficient {lo:.3e} in {what}")
    np.maximum(series, 0.0, out=series)
    return series


def _identity(rows: int, K: int) -> np.ndarray:
    t = np.zeros((rows, K + 1))
    if K >= 1:
        t[:, 1] = 1.0
    return t


def _backward(step_groups, rows: int, K: int):
    """Run the backward pass t_n = s, t_{i-1} = f_i(t_i), H *= h_i(t_i).

    ``step_groups`` lists, from generation n down to 1, the (offspring,
    immigration, row_selector) triples active at that generation.
    """
    T = _identity(rows, K)
    H = np.zeros((rows, K + 1))
    H[:, 0] = 1.0
    for groups in step_groups:
        for f, h, sel in groups:
            t = T[sel]
            if not (isinstance(h, PointMass) and h.j == 0):
                H[sel] = _mul(H[sel], compose(h, t))
            T[sel] = compose(f, t)
    return _check(T, "f_{0,n}"), _check(H, "immigration product")


def _path_groups(env: EnvPath):
    return [[(f, h, slice(None))] for f, h in reversed(env.steps)]


def _index_groups(model: EnvironmentModel, idx: np.ndarray):
    groups = []
    for i in range(idx.shape[1] - 1, -1, -1):
        col = idx[:, i]
        g = []
        for a in np.unique(col):
            atom = model.atoms[a]
            sel = slice(None) if len(g) == 0 and np.all(col == a) else np.flatnonzero(col == a)
            g.append((atom.offspring, atom.immigration, sel))
        groups.append(g)
    return groups


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


@dataclass
class QuenchedLaw:
    """P_k(Z_n = j | xi) for j = 0..K plus the mass (or a bound on it) beyond."""

    n: int
    k: int
    coeffs: np.ndarray
    tail_mass: float
    method: str

    @property
    def K(self) -> int:
        return len(self.coeffs) - 1

    def to_csv(self, path, extra_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["j", "probability", "method", "tail_bound"])
            for j, p in enumerate(self.coeffs):
                w.writerow([j, repr(float(p)), self.method, repr(float(self.tail_mass))])
            if extra_comment:
                fh.write(f"# {extra_comment}\n")


def quenched_eval(env: EnvPath, k: int, s):
    """g_n(k, s) by scalar backward recursion; ``s`` may be an array."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if len(env) == 0:
        raise ValueError("environment must be nonempty")
    s = np.asarray(s, dtype=complex)
    if np.any(np.abs(s) > 1 + 1e-12):
        raise ValueError("|s| must not exceed 1")
    t = s
    prod = np.ones_like(s)
    for f, h in reversed(env.steps):
        prod = prod * h.pgf(t)
        t = np.asarray(f.pgf(t))
    out = t**k * prod
    return out.item() if out.ndim == 0 else out


def quenched_eval_batch(model: EnvironmentModel, idx: np.ndarray, k: int, s: float) -> np.ndarray:
    """Real-argument evaluation of g_n(k, s) for each environment row of ``idx``."""
    R, n = idx.shape
    t = np.full(R, float(s))
    prod = np.ones(R)
    for i in range(n - 1, -1, -1):
        col = idx[:, i]
        tn = np.empty(R)
        for a in np.unique(col):
            sel = col == a
            atom = model.atoms[a]
            prod[sel] *= np.real(atom.immigration.pgf(t[sel]))
            tn[sel] = np.real(atom.offspring.pgf(t[sel]))
        t = tn
    return t**k * prod


def _series_law(env: EnvPath, k: int, K: int) -> np.ndarray:
    T, H = _backward(_path_groups(env), 1, K)
    return _check(_mul(_power(T, k), H), "law")[0]


def quenched_law_series(env: EnvPath, k: int, K: int | None = None) -> QuenchedLaw:
    """Exact coefficients 0..K by truncated series composition.

    With ``K=None`` the cutoff starts at 1024 and doubles until the tail mass
    drops below 1e-8 or the cutoff reaches 2**16.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if K is not None:
        if K < 1:
            raise ValueError("cutoff K must be >= 1")
        coeffs = _series_law(env, k, K)
    else:
        K = DEFAULT_K
        while True:
            coeffs = _series_law(env, k, K)
            if 1.0 - coeffs.sum() < ADAPTIVE_TAIL or K >= MAX_K:
                break
            K *= 2
    tail = max(0.0, 1.0 - float(coeffs.sum()))
    return QuenchedLaw(len(env), k, coeffs, tail, "SeriesComposition")


def _pgf_above_one(spec, t: np.ndarray) -> np.ndarray:
    """Real p.g.f. values for t >= 1; +inf outside the radius of convergence."""
    with np.errstate(over="ignore", invalid="ignore"):
        if isinstance(spec, Poisson):
            return np.exp(spec.m * (t - 1.0))
        if isinstance(spec, LinearFractional):
            a, b = spec.a, spec.b
            den = 1.0 - b * t
            out = a + (1 - a) * (1 - b) * t / np.where(den > 0, den, 1.0)
            return np.where(den > 0, out, np.inf)
        if isinstance(spec, PointMass):
            return t**spec.j
        acc = np.zeros_like(t)
        for c in reversed(spec.probabilities):
            acc = acc * t + c
        return acc


def chernoff_tail(env: EnvPath, k: int, M: int, points: int = 64) -> float:
    """min over s > 1 of g_n(k, s) s**-M, an upper bound on P(Z_n >= M | xi).

    The grid is logarithmic in s - 1 over [1e-12, 1]; points where the
    p.g.f. diverges are skipped.
    """
    s = 1.0 + np.logspace(-12.0, 0.0, points)
    t = s.copy()
    prod = np.ones_like(s)
    with np.errstate(over="ignore", invalid="ignore"):
        for f, h in reversed(env.steps):
            prod = prod * _pgf_above_one(h, t)
            t = _pgf_above_one(f, t)
        logb = k * np.log(t) + np.log(prod) - M * np.log(s)
    logb = logb[np.isfinite(logb)]
    if logb.size == 0:
        return 1.0
    return float(min(1.0, np.exp(np.min(logb))))


def quenched_law_dft(env: EnvPath, k: int, M: int) -> QuenchedLaw:
    """Coefficients from g_n(k, .) at the M-th roots of unity.

    Coefficient j carries the aliased mass of j + M, j + 2M, ...; the
    reported tail bound dominates that error.
    """
    if M < 2 or M & (M - 1):
        raise ValueError("M must be a power of two >= 2")
    roots = np.exp(2j * np.pi * np.arange(M) / M)
    vals = quenched_eval(env, k, roots)
    coeffs = np.real(np.fft.fft(vals)) / M
    if coeffs.min() < -NEG_TOL:
        raise SeriesBreakdown(f"negative DFT coefficient {coeffs.min():.3e}")
    coeffs = np.maximum(coeffs, 0.0)
    return QuenchedLaw(len(env), k, coeffs, chernoff_tail(env, k, M), "DFTExtraction")


def lf_closed_form(env: EnvPath, k: int, s):
    """f_{0,n}(s)**k for linear-fractional offspring via products of 2x2 Mobius matrices.

    Immigration is ignored: this is the law of the classic process Z^0.
    """
    mats = []
    for f, _ in env.steps:
        if not isinstance(f, LinearFractional):
            raise TypeError(f"closed form needs linear-fractional offspring, got {f!r}")
        mats.append(f.mobius())
    P = np.eye(2)
    for A in mats:
        P = P @ A
        P /= np.abs(P).max()
    s = np.asarray(s, dtype=complex)
    val = (P[0, 0] * s + P[0, 1]) / (P[1, 0] * s + P[1, 1])
    out = val**k
    return out.item() if out.ndim == 0 else out


@dataclass
class LawQueries:
    p_zero: float
    p_at: dict
    p_range: float
    p_survive: float
    error: float  # absolute error bar shared by every value
    t: int


def _err_bar(law: QuenchedLaw) -> float:
    # series coefficients below the cutoff are exact; DFT ones carry aliasing
    return 0.0 if law.method == "SeriesComposition" else float(law.tail_mass)


def law_queries(law: QuenchedLaw, j_list: Iterable[int] = (), t: int = 1) -> LawQueries:
    j_list = list(j_list)
    for j in j_list + [t]:
        if j > law.K:
            raise QueryError(f"query at {j} exceeds the law cutoff K={law.K}")
        if j < 0:
            raise QueryError("queries must be nonnegative")
    c = law.coeffs
    return LawQueries(
        p_zero=float(c[0]),
        p_at={j: float(c[j]) for j in j_list},
        p_range=float(c[1 : t + 1].sum()),
        p_survive=1.0 - float(c[0]),
        error=_err_bar(law),
        t=t,
    )


# ---------------------------------------------------------------------------
# annealed estimates by conditional Monte Carlo over environments
# ---------------------------------------------------------------------------


def parse_query(query) -> tuple[str, int]:
    """Accept "p_zero", "p_survive", ("p_at", j) or ("p_range", t)."""
    if isinstance(query, str):
        if query in ("p_zero", "p_survive"):
            return query, 0
        raise QueryError(f"unknown query {query!r}")
    name, arg = query
    if name not in ("p_at", "p_range"):
        raise QueryError(f"unknown query {query!r}")
    if int(arg) < 0:
        raise QueryError("query index must be nonnegative")
    return name, int(arg)


def _query_values(coeffs: np.ndarray, name: str, arg: int) -> np.ndarray:
    if name == "p_zero":
        return coeffs[:, 0]
    if name == "p_survive":
        return 1.0 - coeffs[:, 0]
    if name == "p_at":
        return coeffs[:, arg]
    return coeffs[:, 1 : arg + 1].sum(axis=1)


def batch_laws(model: EnvironmentModel, idx: np.ndarray, ks: Sequence[int], K: int, workers: int = 1) -> dict:
    """Exact coefficient arrays (R, K+1) of Z_n for each initial count in ``ks``.

    Row r uses the environment whose atom labels are ``idx[r]``.
    """
    idx = np.atleast_2d(idx)

    def work(rows):
        sub = idx[rows]
        T, H = _backward(_index_groups(model, sub), len(sub), K)
        return {k: _check(_mul(_power(T, k), H), "law") for k in ks}

    parts = [slice(a, b) for _, a, b in chunks(len(idx))]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(work, parts))
    else:
        results = [work(p) for p in parts]
    return {k: np.concatenate([r[k] for r in results]) for k in ks}


@dataclass
class AnnealedEstimate:
    estimate: float
    std_error: float
    R: int
    query: tuple
    values: np.ndarray = field(repr=False, default=None)
    tail_dominated: bool = False


def env_indices(model: EnvironmentModel, n: int, R: int, seed: int, *key: int) -> np.ndarray:
    """(R, n) atom labels; one environment per row, keyed by ``seed`` and ``key``."""
    return sample_atom_indices(model, (R, n), stream(seed, ENV, *key))


def summarize(values: np.ndarray) -> tuple[float, float]:
    R = len(values)
    est = float(np.mean(values))
    if R > 1 and np.ptp(values) == 0:
        # a degenerate mixture; rounding in the mean would otherwise leak into the error bar
        return float(values[0]), 0.0
    se = float(np.std(values, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    return est, se


def annealed_prob(
    model: EnvironmentModel,
    k: int,
    n: int,
    query,
    R: int,
    K: int | None = None,
    seed: int = 0,
    workers: int = 1,
    idx: np.ndarray | None = None,
) -> AnnealedEstimate:
    """E[P_k(event | xi)] estimated from R exact quenched values.

    The cutoff defaults to the smallest one that covers the query; small-j
    coefficients are exact whatever happens above the cutoff.
    """
    if R < 2:
        raise ValueError("need at least two environment replications")
    name, arg = parse_query(query)
    need = max(arg, 1)
    if K is None:
        K = need
    if need > K:
        raise QueryError(f"query index {arg} exceeds cutoff K={K}")
    if idx is None:
        idx = env_indices(model, n, R, seed)
    coeffs = batch_laws(model, idx, [k], K, workers)[k]
    vals = _query_values(coeffs, name, arg)
    est, se = summarize(vals)
    return AnnealedEstimate(est, se, R, (name, arg), vals)
