"""Independent reference computations used only by the tests.

Nothing here shares code paths with the engine: laws come from scipy or from
the annealed transition matrix, minima from a double loop.
"""

from __future__ import annotations


import numpy as np
from scipy import stats as sps


def spec_pmf(spec, J: int) -> np.ndarray:
    """pmf on 0..J straight from scipy or the defining formula."""
    kind = spec.kind
    j = np.arange(J + 1)
    if kind == "poisson":
        return sps.poisson.pmf(j, spec.m)
    if kind == "point_mass":
        return (j == spec.j).astype(float)
    if kind == "linear_fractional":
        out = (1 - spec.a) * (1 - spec.b) * spec.b ** np.maximum(j - 1, 0).astype(float)
        out[0] = spec.a
        return out
    p = np.zeros(J + 1)
    q = np.asarray(spec.probabilities)[: J + 1]
    p[: q.size] = q
    return p


def annealed_kernel(model, J: int = 120) -> np.ndarray:
    """P(i -> j) = sum_a w_a P(N_1 + ... + N_i + Y = j) on the states 0..J.

    With an i.i.d. environment the annealed process is a Markov chain, so
    matrix powers give exact annealed laws for states well below J.
    """
    P = np.zeros((J + 1, J + 1))
    for atom in model.atoms:
        f = spec_pmf(atom.offspring, J)
        row = spec_pmf(atom.immigration, J)
        for i in range(J + 1):
            P[i] += atom.weight * row
            row = np.convolve(row, f)[: J + 1]
    return P


def annealed_law(model, k: int, n: int, J: int = 120) -> np.ndarray:
    P = annealed_kernel(model, J)
    return np.linalg.matrix_power(P, n)[k]


def kernel_decay_rate(model, J: int = 120) -> float:
    """log of the spectral radius of the truncated annealed kernel."""
    return float(np.log(np.max(np.abs(np.linalg.eigvals(annealed_kernel(model, J))))))


def minima_brute_force(walk) -> list[int]:
    s = list(walk)
    if not s:
        return []
    out = [0]
    for n in range(1, len(s)):
        later = s[n + 1 :]
        if later and all(x > s[n] for x in later):
            out.append(n)
    return out


def poisson_harmonic(m: float, alpha: float, terms: int = 200) -> float:
    j = np.arange(1, terms)
    return float(np.sum(sps.poisson.pmf(j, m) / j**alpha))


def chi_square_pvalue(counts_by_value: np.ndarray, probs: np.ndarray, top: int = 20) -> float:
    """Pearson test of integer samples against a law on 0..top plus an overflow bin.

    Bins whose expected count falls below 5 are pooled so the chi-square
    approximation stays valid.
    """
    x = np.asarray(counts_by_value)
    N = x.size
    obs = np.array([np.count_nonzero(x == j) for j in range(top + 1)] + [np.count_nonzero((x > top) | (x < 0))], float)
    p = np.append(np.asarray(probs, float)[: top + 1], 0.0)
    p[-1] = max(0.0, 1.0 - p[:-1].sum())
    exp = N * p
    keep = exp >= 5
    o = np.append(obs[keep], obs[~keep].sum())
    e = np.append(exp[keep], exp[~keep].sum())
    if e[-1] < 5:
        o[-2] += o[-1]
        e[-2] += e[-1]
        o, e = o[:-1], e[:-1]
    e = e * o.sum() / e.sum()
    return float(sps.chisquare(o, e).pvalue)
