"""Path simulation of the process with immigration (and of the classic process).

Generation sums are drawn from their exact aggregated laws (a sum of z
Poisson(m) draws is Poisson(z m), and so on), so populations of any size
cost O(1) per generation. Once a population exceeds ``SWITCH`` it is
followed on the log scale only, using the normal approximation of the
offspring sum; the generation of the switch is recorded per path.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env_model import EnvironmentModel, EnvPath, sample_atom_indices
from .seeding import ENV, PATH, chunks, stream

SWITCH = 1 << 50
LOG_ONLY = -1  # marks a count tracked on the log scale only


@dataclass
class PathSample:
    z: np.ndarray
    log_z: np.ndarray
    env_seed: int | None
    path_seed: int | None
    switch_gen: int | None = None

    @property
    def survived_at(self) -> np.ndarray:
        return np.isfinite(self.log_z)

    @property
    def n(self) -> int:
        return len(self.z) - 1


@dataclass
class BatchPaths:
    """Many paths at once; rows are paths, columns the recorded generations."""

    gens: np.ndarray
    z: np.ndarray
    log_z: np.ndarray
    switch_gen: np.ndarray
    idx: np.ndarray = field(repr=False)

    def column(self, n: int) -> int:
        hits = np.flatnonzero(self.gens == n)
        if hits.size == 0:
            raise KeyError(f"generation {n} was not recorded")
        return int(hits[0])

    def logz_at(self, n: int) -> np.ndarray:
        return self.log_z[:, self.column(n)]

    def z_at(self, n: int) -> np.ndarray:
        return self.z[:, self.column(n)]

    def alive_at(self, n: int) -> np.ndarray:
        return np.isfinite(self.logz_at(n))


def _step(z, logz, off, imm, rng):
    """Advance one generation for rows sharing one (offspring, immigration) pair."""
    counted = z >= 0
    z_new = z.copy()
    logz_new = logz.copy()
    if counted.any():
        zc = z[counted]
        nxt = off.sample_sum(zc, rng) + imm.sample_sum(np.ones_like(zc), rng)
        z_new[counted] = nxt
        with np.errstate(divide="ignore"):
            logz_new[counted] = np.log(nxt.astype(float))
    big = ~counted
    if big.any():
        L = logz[big]
        m, v = off.mean, off.variance
        xi = rng.standard_normal(L.size)
        y = imm.sample_sum(np.ones(L.size, dtype=np.int64), rng)
        growth = m + math.sqrt(v) * np.exp(-L / 2) * xi + y * np.exp(-L)
        logz_new[big] = L + np.log(growth)
    over = z_new > SWITCH
    z_new[over] = LOG_ONLY
    return z_new, logz_new


def _simulate_rows(pairs, idx, k, rng, record):
    R, n = idx.shape
    z = np.full(R, k, dtype=np.int64)
    with np.errstate(divide="ignore"):
        logz = np.full(R, math.log(k) if k > 0 else -np.inf)
    switch = np.full(R, -1, dtype=np.int64)
    rec_z = np.empty((R, len(record)), dtype=np.int64)
    rec_l = np.empty((R, len(record)))
    slot = {g: c for c, g in enumerate(record)}
    if 0 in slot:
        rec_z[:, slot[0]] = z
        rec_l[:, slot[0]] = logz
    for i in range(n):
        col = idx[:, i]
        for a in np.unique(col):
            sel = np.flatnonzero(col == a)
            f, h = pairs[a]
            z[sel], logz[sel] = _step(z[sel], logz[sel], f, h, rng)
        newly = (z == LOG_ONLY) & (switch < 0)
        switch[newly] = i + 1
        if i + 1 in slot:
            rec_z[:, slot[i + 1]] = z
            rec_l[:, slot[i + 1]] = logz
    return rec_z, rec_l, switch


def _pairs(model: EnvironmentModel) -> list:
    return [(a.offspring, a.immigration) for a in model.atoms]


def simulate_batch(
    model: EnvironmentModel,
    idx: np.ndarray,
    k: int,
    seed: int,
    key: Sequence[int] = (),
    record: Sequence[int] | None = None,
    workers: int = 1,
) -> BatchPaths:
    """Simulate one path per row of the atom-label matrix ``idx``.

    Rows are split into fixed chunks and chunk ``c`` draws from the stream
    keyed ``(PATH, *key, c)``, so results do not depend on ``workers``.
    """
    if k < 0:
        raise ValueError("initial count must be >= 0")
    idx = np.atleast_2d(idx)
    n = idx.shape[1]
    record = list(range(n + 1)) if record is None else sorted(set(int(g) for g in record))
    if record and (record[0] < 0 or record[-1] > n):
        raise ValueError("recorded generations must lie in 0..n")

    pairs = _pairs(model)

    def work(part):
        c, a, b = part
        return _simulate_rows(pairs, idx[a:b], k, stream(seed, PATH, *key, c), record)

    parts = list(chunks(len(idx)))
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(work, parts))
    else:
        out = [work(p) for p in parts]
    return BatchPaths(
        gens=np.asarray(record),
        z=np.concatenate([o[0] for o in out]),
        log_z=np.concatenate([o[1] for o in out]),
        switch_gen=np.concatenate([o[2] for o in out]),
        idx=idx,
    )


def simulate_paths(
    model: EnvironmentModel, k: int, n: int, R: int, seed: int, key: Sequence[int] = (), record=None, workers: int = 1
) -> BatchPaths:
    """R annealed paths: fresh environment per path, then the path itself."""
    idx = sample_atom_indices(model, (R, n), stream(seed, ENV, *key))
    return simulate_batch(model, idx, k, seed, key, record, workers)


def simulate_quenched(env: EnvPath, k: int, seed: int) -> PathSample:
    if k < 0:
        raise ValueError("initial count must be >= 0")
    pairs = []
    for st in env.steps:
        if st not in pairs:
            pairs.append(st)
    idx = np.array([[pairs.index(st) for st in env.steps]])
    rz, rl, sw = _simulate_rows(pairs, idx, k, stream(seed, PATH), list(range(len(env) + 1)))
    return PathSample(rz[0], rl[0], None, seed, None if sw[0] < 0 else int(sw[0]))


def simulate_annealed(model: EnvironmentModel, k: int, n: int, seed: int) -> tuple[EnvPath, PathSample]:
    idx = sample_atom_indices(model, (1, n), stream(seed, ENV))
    env = EnvPath.from_indices(model, idx[0])
    rz, rl, sw = _simulate_rows(_pairs(model), idx, k, stream(seed, PATH), list(range(n + 1)))
    return env, PathSample(rz[0], rl[0], seed, seed, None if sw[0] < 0 else int(sw[0]))


# ---------------------------------------------------------------------------
# ancestral decomposition Z_n = Z^0_n + sum_i Z^0_{i,n}
# ---------------------------------------------------------------------------


@dataclass
class DecomposedSample:
    z0: np.ndarray
    immig_lines: np.ndarray  # row i-1: line of the generation-i immigrants, zero before i
    z: np.ndarray

    def check(self) -> bool:
        return bool(np.array_equal(self.z, self.z0 + self.immig_lines.sum(axis=0)))


def _classic_line(env_steps, start_gen: int, z_start: int, rng, n: int) -> np.ndarray:
    line = np.zeros(n + 1, dtype=np.int64)
    line[start_gen] = z_start
    z = np.array([z_start], dtype=np.int64)
    for g in range(start_gen + 1, n + 1):
        f, _ = env_steps[g - 1]
        z = f.sample_sum(z, rng)
        if z[0] > SWITCH:
            raise OverflowError("decomposed simulation is exact-count only; population overflowed")
        line[g] = z[0]
    return line


def simulate_decomposed(env: EnvPath, k: int, seed: int) -> DecomposedSample:
    """Founders' classic line plus one independent classic line per immigrant cohort."""
    if k < 0:
        raise ValueError("initial count must be >= 0")
    rng = stream(seed, PATH)
    steps = env.steps
    n = len(steps)
    z0 = _classic_line(steps, 0, k, rng, n)
    lines = np.zeros((n, n + 1), dtype=np.int64)
    for i in range(1, n + 1):
        _, h = steps[i - 1]
        y = int(h.sample_sum(np.ones(1, dtype=np.int64), rng)[0])
        lines[i - 1] = _classic_line(steps, i, y, rng, n)
    return DecomposedSample(z0, lines, z0 + lines.sum(axis=0))


# ---------------------------------------------------------------------------
# Delta_n = Z_{n+1} / (m_{n+1} Z_n)
# ---------------------------------------------------------------------------


@dataclass
class DeltaRecord:
    n: int
    delta: float
    log_m_z: float
    valid: bool


def delta_record(path: PathSample, env: EnvPath, n: int) -> DeltaRecord:
    m = env.steps[n][0].mean
    if not path.survived_at[n]:
        return DeltaRecord(n, float("nan"), float("nan"), False)
    lmz = math.log(m) + path.log_z[n]
    if not path.survived_at[n + 1]:
        return DeltaRecord(n, 0.0, lmz, True)
    return DeltaRecord(n, math.exp(path.log_z[n + 1] - lmz), lmz, True)


@dataclass
class DeltaSummary:
    n: int
    p: float
    r: float
    R: int
    survivors: int
    abs_dev_p: tuple  # E[|Delta_n - 1|^p; Z_n > 0]
    weighted_dev: tuple  # E[|log(m Z_n)|^r |Delta_n - 1|^p; Z_n > 0]
    abs_log_delta: tuple  # E[|log Delta_n|; Z_{n+1} > 0, Z_n > 0]


class AllExtinct(RuntimeError):
    pass


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def delta_records(
    model: EnvironmentModel, k: int, n: int, R: int, p: float, r: float, seed: int, workers: int = 1
) -> DeltaSummary:
    """Monte Carlo moments of the one-step deviation Delta_n over R annealed paths."""
    if R < 100:
        raise ValueError("need at least 100 paths")
    if not (1 < p <= 2):
        raise ValueError("p must lie in (1, 2]")
    if r < 0:
        raise ValueError("r must be >= 0")
    bp = simulate_paths(model, k, n + 1, R, seed, key=(n,), record=[n, n + 1], workers=workers)
    L0, L1 = bp.logz_at(n), bp.logz_at(n + 1)
    z0, z1 = bp.z_at(n).astype(float), bp.z_at(n + 1).astype(float)
    alive = np.isfinite(L0)
    if not alive.any():
        raise AllExtinct(f"all {R} paths extinct at generation {n}")
    m = np.array([a.offspring.mean for a in model.atoms])[bp.idx[:, n]]
    counted = (z0 > 0) & (z1 >= 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lmz = np.where(alive, np.log(m) + L0, 0.0)
        # exact ratio while both counts are tracked, log scale otherwise
        delta = np.where(counted, z1 / (m * z0), np.exp(L1 - lmz))
        delta = np.where(alive, delta, 0.0)
        both = alive & np.isfinite(L1)
        ld = np.where(both, np.abs(np.log(np.where(both, delta, 1.0))), 0.0)
    dev = np.where(alive, np.abs(delta - 1.0) ** p, 0.0)
    wdev = np.where(alive, np.abs(lmz) ** r * dev, 0.0)
    return DeltaSummary(n, p, r, R, int(alive.sum()), _mean_se(dev), _mean_se(wdev), _mean_se(ld))


def write_paths_csv(path, bp: BatchPaths, comment: str | None = None) -> None:
    """Long-format path dump: one row per (path, recorded generation)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "n", "Z_n", "scale", "survived"])
        for pid in range(bp.z.shape[0]):
            for c, g in enumerate(bp.gens):
                z = bp.z[pid, c]
                if z == LOG_ONLY:
                    w.writerow([pid, int(g), repr(float(bp.log_z[pid, c])), "log", 1])
                else:
                    w.writerow([pid, int(g), int(z), "count", int(z > 0)])
        if comment:
            fh.write(f"# {comment}\n")
