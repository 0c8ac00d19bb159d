"""The associated random walk S_n = sum log m_i and the quantities built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .env_model import EnvironmentModel, sample_atom_indices
from .seeding import WALK, stream

SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class WalkStats:
    mu: float
    sigma2: float
    kappa3: float
    kappa4: float

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def lam(model: EnvironmentModel, s):
    """Characteristic function of log m_1: sum_a w_a exp(i s log m_a)."""
    s = np.asarray(s, dtype=float)
    out = np.exp(1j * np.multiply.outer(s, model.log_means)) @ model.weights
    return out.item() if out.ndim == 0 else out


def walk_stats(model: EnvironmentModel) -> WalkStats:
    x, w = model.log_means, model.weights
    mu = float(w @ x)
    c = x - mu
    m2, m3, m4 = (float(w @ c**p) for p in (2, 3, 4))
    return WalkStats(mu, max(m2, 0.0), m3, m4 - 3 * m2 * m2)


def prospective_minima(walk) -> list[int]:
    """nu(0) = 0 and then every later index strictly below all subsequent values.

    The last index never qualifies: it has no later values to compare with.
    """
    s = np.asarray(walk, dtype=float)
    if s.size == 0:
        return []
    # suffix minimum over strictly later indices
    later_min = np.empty(s.size)
    later_min[-1] = np.inf
    if s.size > 1:
        later_min[:-1] = np.minimum.accumulate(s[::-1])[::-1][1:]
    ok = later_min > s
    ok[-1] = False
    return [0] + [int(i) for i in np.flatnonzero(ok) if i > 0]


def truncated_log_means(model: EnvironmentModel, a: int) -> np.ndarray:
    """log of the mean of each offspring law with mass at >= a lumped onto a."""
    out = []
    for atom in model.atoms:
        pm = atom.offspring.pmf(a - 1) if a >= 1 else np.zeros(0)
        j = np.arange(len(pm))
        m = float(j @ pm) + a * max(0.0, 1.0 - float(pm.sum()))
        out.append(math.log(m) if m > 0 else -np.inf)
    return np.array(out)


@dataclass
class MinimaDensity:
    n: int
    eps: float
    eps_drift: float
    horizon: int
    probability: float
    std_error: float
    mean_first_gap: float
    note: str


def minima_density_check(
    model: EnvironmentModel,
    a: int = 10,
    eps_drift: float | None = None,
    n: int = 100,
    R: int = 2000,
    seed: int = 0,
    eps: float | None = None,
    eps_fraction: float = 0.5,
    horizon_factor: int = 4,
) -> MinimaDensity:
    """Empirical P(#{j : nu(j) <= n} < eps n) for the drift-shifted truncated walk.

    Prospective minima are computed on a finite horizon ``horizon_factor * n``,
    which can only over-count them. When ``eps`` is not given it is set to
    ``eps_fraction / E[nu(1)]`` with E[nu(1)] estimated from the same walks.
    """
    xbar = truncated_log_means(model, a)
    mean_bar = float(model.weights @ xbar)
    if eps_drift is None:
        eps_drift = 0.5 * mean_bar
    if not (0 < eps_drift < mean_bar) and not (eps_drift == 0 and mean_bar > 0):
        raise ValueError(f"drift must lie in (0, {mean_bar:.4g}); truncated mean is not large enough")
    horizon = horizon_factor * n
    rng = stream(seed, WALK, n)
    idx = sample_atom_indices(model, (R, horizon), rng)
    steps = xbar[idx] - eps_drift
    walks = np.concatenate([np.zeros((R, 1)), np.cumsum(steps, axis=1)], axis=1)
    counts = np.empty(R)
    first = np.empty(R)
    for r in range(R):
        nu = prospective_minima(walks[r])
        nu = np.asarray(nu)
        counts[r] = np.count_nonzero(nu <= n)
        first[r] = nu[1] if nu.size > 1 else horizon
    mean_gap = float(first.mean())
    if eps is None:
        eps = eps_fraction / mean_gap
    hit = (counts < eps * n).astype(float)
    p = float(hit.mean())
    se = float(hit.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    note = f"horizon {horizon} for the 'all later k' condition; finite horizons can only over-count minima"
    return MinimaDensity(n, eps, eps_drift, horizon, p, se, mean_gap, note)


@dataclass(frozen=True)
class EdgeworthSpec:
    stats: WalkStats
    shift_b: float = 0.0
    order: int = 3
    cramer_ok: bool = False

    def __post_init__(self):
        if self.order < 3:
            raise ValueError("order must be >= 3")
        if self.order > 3 and not self.cramer_ok:
            raise NotImplementedError("orders above 3 need Cramer's condition, which finite mixtures cannot certify")
        if self.order > 3:
            raise NotImplementedError("only the first-order (r = 3) polynomial is implemented")


def edgeworth_p3(x, spec: EdgeworthSpec):
    st = spec.stats
    if st.sigma2 <= 0:
        raise ValueError("degenerate walk: sigma2 = 0")
    sd = st.sigma
    x = np.asarray(x, dtype=float)
    return st.kappa3 / (6 * sd**3) * (x * x - 1) + spec.shift_b / sd


def edgeworth_G3(x, n: int, spec: EdgeworthSpec):
    """Phi(x) - phi(x) n**-1/2 P_3(x) with P_3 = kappa3/(6 sd^3) (x^2 - 1) + b / sd."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=float)
    out = ndtr(x) - np.exp(-x * x / 2) / SQRT_2PI * edgeworth_p3(x, spec) / math.sqrt(n)
    return out.item() if out.ndim == 0 else out


def g3_correction_bound(spec: EdgeworthSpec, grid=None) -> float:
    """sup_x |phi(x) P_3(x)| on a grid; |G_3 - Phi| <= this / sqrt(n)."""
    x = np.linspace(-8, 8, 3201) if grid is None else np.asarray(grid)
    return float(np.max(np.abs(np.exp(-x * x / 2) / SQRT_2PI * edgeworth_p3(x, spec))))


@dataclass
class CramerCheck:
    sup_abs_lambda: float
    at_s: float
    flag: bool


def cramer_check(model: EnvironmentModel, s_max: float, grid: int = 20000) -> CramerCheck:
    """Grid maximum of |lambda(s)| over 1 <= |s| <= s_max; a heuristic, never a proof."""
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    s = np.linspace(1.0, s_max, grid)
    v = np.abs(lam(model, s))
    i = int(np.argmax(v))
    sup = float(v[i])
    return CramerCheck(sup, float(s[i]), sup <= 1 - 1e-3)
