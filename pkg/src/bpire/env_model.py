"""Parametric environments: one-generation laws, i.i.d. environment sampling,
and checks of the standing model assumptions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from .seeding import ENV, stream

PROB_TOL = 1e-12


class InvalidSpecError(ValueError):
    """A distribution or model was built with out-of-range parameters."""


def _as_complex(s):
    s = np.asarray(s, dtype=complex)
    if np.any(np.abs(s) > 1 + 1e-12):
        raise ValueError("p.g.f. argument must satisfy |s| <= 1")
    return s


def _unwrap(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


@dataclass(frozen=True)
class PointMass:
    """All mass at the count ``j``."""

    j: int

    def __post_init__(self):
        if int(self.j) != self.j or self.j < 0:
            raise InvalidSpecError(f"PointMass needs a nonnegative integer, got {self.j!r}")
        object.__setattr__(self, "j", int(self.j))

    kind = "point_mass"

    @property
    def mean(self) -> float:
        return float(self.j)

    @property
    def variance(self) -> float:
        return 0.0

    def pgf(self, s):
        return _unwrap(_as_complex(s) ** self.j)

    def pmf(self, K: int) -> np.ndarray:
        out = np.zeros(K + 1)
        if self.j <= K:
            out[self.j] = 1.0
        return out

    def sample_sum(self, count, rng):
        return self.j * np.asarray(count, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "j": self.j}


@dataclass(frozen=True)
class Poisson:
    m: float

    kind = "poisson"

    def __post_init__(self):
        m = float(self.m)
        if not (math.isfinite(m) and m >= 0):
            raise InvalidSpecError(f"Poisson mean must be finite and >= 0, got {self.m!r}")
        object.__setattr__(self, "m", m)

    @property
    def mean(self) -> float:
        return self.m

    @property
    def variance(self) -> float:
        return self.m

    def pgf(self, s):
        return _unwrap(np.exp(self.m * (_as_complex(s) - 1)))

    def pmf(self, K: int) -> np.ndarray:
        j = np.arange(K + 1)
        if self.m == 0:
            return (j == 0).astype(float)
        from scipy.stats import poisson

        return poisson.pmf(j, self.m)

    def sample_sum(self, count, rng):
        return rng.poisson(self.m * np.asarray(count, dtype=float)).astype(np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.m}


@dataclass(frozen=True)
class LinearFractional:
    """Mass ``a`` at zero and a geometric tail ``(1-a)(1-b) b**(k-1)`` for k >= 1."""

    a: float
    b: float

    kind = "linear_fractional"

    def __post_init__(self):
        for name in ("a", "b"):
            v = float(getattr(self, name))
            if not (0.0 <= v < 1.0):
                raise InvalidSpecError(f"LinearFractional {name} must lie in [0, 1), got {v!r}")
            object.__setattr__(self, name, v)

    @property
    def mean(self) -> float:
        return (1 - self.a) / (1 - self.b)

    @property
    def variance(self) -> float:
        a, b = self.a, self.b
        return (1 - a) * (1 + b) / (1 - b) ** 2 - ((1 - a) / (1 - b)) ** 2

    def pgf(self, s):
        s = _as_complex(s)
        a, b = self.a, self.b
        return _unwrap(a + (1 - a) * (1 - b) * s / (1 - b * s))

    def pmf(self, K: int) -> np.ndarray:
        out = np.empty(K + 1)
        out[0] = self.a
        k = np.arange(1, K + 1)
        out[1:] = (1 - self.a) * (1 - self.b) * self.b ** (k - 1)
        return out

    def mobius(self) -> np.ndarray:
        """2x2 matrix of the Mobius map s -> f(s)."""
        a, b = self.a, self.b
        return np.array([[(1 - a) * (1 - b) - a * b, a], [-b, 1.0]])

    def sample_sum(self, count, rng):
        # nonzero individuals ~ Bin(count, 1-a); each contributes 1 + Geom(b)
        count = np.asarray(count, dtype=np.int64)
        nonzero = rng.binomial(count, 1 - self.a)
        extra = np.zeros_like(nonzero)
        pos = nonzero > 0
        if self.b > 0 and np.any(pos):
            extra[pos] = rng.negative_binomial(nonzero[pos], 1 - self.b)
        return nonzero + extra

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Finite:
    probabilities: tuple

    kind = "finite"

    def __post_init__(self):
        p = tuple(float(x) for x in self.probabilities)
        if not p:
            raise InvalidSpecError("Finite needs at least one probability")
        if any(x < 0 or not math.isfinite(x) for x in p):
            raise InvalidSpecError("Finite probabilities must be finite and nonnegative")
        if abs(sum(p) - 1.0) > PROB_TOL:
            raise InvalidSpecError(f"Finite probabilities sum to {sum(p)!r}, not 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probabilities)), self.probabilities))

    @property
    def variance(self) -> float:
        j = np.arange(len(self.probabilities))
        p = np.asarray(self.probabilities)
        return float(np.dot(j * j, p) - np.dot(j, p) ** 2)

    def pgf(self, s):
        s = _as_complex(s)
        acc = np.zeros_like(s)
        for c in reversed(self.probabilities):
            acc = acc * s + c
        return _unwrap(acc)

    def pmf(self, K: int) -> np.ndarray:
        out = np.zeros(K + 1)
        p = self.probabilities[: K + 1]
        out[: len(p)] = p
        return out

    def sample_sum(self, count, rng):
        count = np.asarray(count, dtype=np.int64)
        draws = rng.multinomial(count, self.probabilities)
        return draws @ np.arange(len(self.probabilities), dtype=np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "probabilities": list(self.probabilities)}


Spec = Union[PointMass, Poisson, LinearFractional, Finite]
OffspringSpec = Spec
ImmigrationSpec = Spec


def pgf_eval(spec: Spec, s):
    """Evaluate the p.g.f. of ``spec`` at ``s`` (scalar or array, |s| <= 1)."""
    return spec.pgf(s)


def mean(spec: Spec) -> float:
    return spec.mean


def spec_from_dict(d: dict) -> Spec:
    kind = d.get("kind")
    try:
        if kind == "point_mass":
            return PointMass(d["j"])
        if kind == "poisson":
            return Poisson(d["mean"])
        if kind == "linear_fractional":
            return LinearFractional(d["a"], d["b"])
        if kind == "finite":
            return Finite(tuple(d["probabilities"]))
    except KeyError as exc:
        raise InvalidSpecError(f"{kind} spec is missing field {exc.args[0]!r}") from None
    raise InvalidSpecError(f"unknown spec kind {kind!r}")


@dataclass(frozen=True)
class EnvAtom:
    weight: float
    offspring: Spec
    immigration: Spec

    def __post_init__(self):
        # zero-weight atoms are allowed and simply never drawn
        if not (0.0 <= self.weight <= 1.0):
            raise InvalidSpecError(f"atom weight must lie in [0, 1], got {self.weight!r}")
        if not self.offspring.mean > 0:
            raise InvalidSpecError("offspring mean must be strictly positive")

    @property
    def log_mean(self) -> float:
        return math.log(self.offspring.mean)


@dataclass(frozen=True)
class EnvironmentModel:
    """Finite mixture of (offspring, immigration) atoms drawn i.i.d. each generation."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise InvalidSpecError("environment model needs at least one atom")
        total = sum(a.weight for a in atoms)
        if abs(total - 1.0) > PROB_TOL:
            raise InvalidSpecError(f"atom weights sum to {total!r}, not 1")
        object.__setattr__(self, "atoms", atoms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.atoms])

    @property
    def log_means(self) -> np.ndarray:
        return np.array([a.log_mean for a in self.atoms])

    def to_dict(self) -> dict:
        return {
            "atoms": [
                {"weight": a.weight, "offspring": a.offspring.to_dict(), "immigration": a.immigration.to_dict()}
                for a in self.atoms
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentModel":
        if not isinstance(d, dict) or "atoms" not in d:
            raise InvalidSpecError("model document needs an 'atoms' list")
        atoms = []
        for i, a in enumerate(d["atoms"]):
            try:
                atoms.append(
                    EnvAtom(float(a["weight"]), spec_from_dict(a["offspring"]), spec_from_dict(a["immigration"]))
                )
            except KeyError as exc:
                raise InvalidSpecError(f"atom {i} is missing field {exc.args[0]!r}") from None
        return cls(tuple(atoms))

    @classmethod
    def load(cls, path) -> "EnvironmentModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def single(cls, offspring: Spec, immigration: Spec) -> "EnvironmentModel":
        return cls((EnvAtom(1.0, offspring, immigration),))


@dataclass(frozen=True)
class EnvPath:
    """A realised environment: one (offspring, immigration) pair per generation."""

    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple((f, h) for f, h in self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def offspring(self) -> list:
        return [f for f, _ in self.steps]

    @property
    def immigration(self) -> list:
        return [h for _, h in self.steps]

    def without_immigration(self) -> "EnvPath":
        return EnvPath(tuple((f, PointMass(0)) for f, _ in self.steps))

    def shifted(self, i: int) -> "EnvPath":
        """The environment seen from generation ``i`` on."""
        return EnvPath(self.steps[i:])

    @classmethod
    def from_indices(cls, model: EnvironmentModel, idx) -> "EnvPath":
        return cls(tuple((model.atoms[i].offspring, model.atoms[i].immigration) for i in idx))

    @classmethod
    def constant(cls, offspring: Spec, immigration: Spec, n: int) -> "EnvPath":
        return cls(((offspring, immigration),) * n)


def sample_atom_indices(model: EnvironmentModel, size, rng) -> np.ndarray:
    """i.i.d. atom labels; ``size`` may be an int or a shape tuple."""
    w = model.weights
    if len(w) == 1:
        return np.zeros(size, dtype=np.intp)
    return rng.choice(len(w), size=size, p=w / w.sum())


def sample_env(model: EnvironmentModel, n: int, seed: int) -> EnvPath:
    if n < 1:
        raise ValueError("environment length must be >= 1")
    idx = sample_atom_indices(model, n, stream(seed, ENV))
    return EnvPath.from_indices(model, idx)


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    holds: bool
    witness: Any = None

    def __bool__(self) -> bool:
        return self.holds


@dataclass(frozen=True)
class AssumptionReport:
    mu: float
    supercritical: Verdict
    A: Verdict
    B: Verdict
    C: Verdict
    nonlattice_plausible: Verdict
    delta: float
    p: float
    q: float

    @property
    def required_ok(self) -> bool:
        return bool(self.supercritical and self.A and self.B and self.C)

    def failures(self) -> list[str]:
        names = {
            "supercritical": self.supercritical,
            "Assumption (A)": self.A,
            "Assumption (B)": self.B,
            "Assumption (C)": self.C,
        }
        return [k for k, v in names.items() if not v]

    def to_dict(self) -> dict:
        def v(x: Verdict):
            return {"holds": x.holds, "witness": x.witness}

        return {
            "mu": self.mu,
            "supercritical": v(self.supercritical),
            "A": v(self.A),
            "B": v(self.B),
            "C": v(self.C),
            "nonlattice_plausible": v(self.nonlattice_plausible),
            "delta": self.delta,
            "p": self.p,
            "q": self.q,
            "required_ok": self.required_ok,
        }


def _raw_moment(spec: Spec, p: float, tol: float = 1e-15, cap: int = 1 << 20) -> float:
    """E[X**p] for p > 0, summed until the remaining mass is below ``tol``."""
    if isinstance(spec, PointMass):
        return float(spec.j) ** p
    if isinstance(spec, Finite):
        j = np.arange(len(spec.probabilities), dtype=float)
        return float(np.dot(j**p, spec.probabilities))
    K = 64
    while True:
        pm = spec.pmf(K)
        if 1.0 - pm.sum() < tol or K >= cap:
            break
        K *= 2
    return float(np.dot(np.arange(K + 1, dtype=float) ** p, pm))


def _condition_c_value(atom: EnvAtom, p: float, q: float) -> tuple[float, float]:
    m = atom.offspring.mean
    lm = abs(math.log(m))
    offspring_term = (1 + lm**q) * (_raw_moment(atom.offspring, p) / m**p + 1)
    immigration_term = _raw_moment(atom.immigration, p)
    return offspring_term, immigration_term


def _on_arithmetic_lattice(values: Sequence[float], tol: float = 1e-9, max_den: int = 1000) -> bool:
    """True if all nonzero values are integer multiples of a common span."""
    nz = [v for v in values if abs(v) > tol]
    if len(nz) <= 1:
        return True
    ref = nz[0]
    for v in nz[1:]:
        r = v / ref
        frac = Fraction(r).limit_denominator(max_den)
        if abs(r - float(frac)) > tol:
            return False
    return True


def validate_assumptions(model: EnvironmentModel, delta: float, p: float, q: float) -> AssumptionReport:
    if not (0 < delta < 1):
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    if not (1 < p <= 2):
        raise ValueError(f"p must lie in (1, 2], got {p!r}")
    if not q > 1:
        raise ValueError(f"q must exceed 1, got {q!r}")

    atoms = model.atoms
    mu = float(np.dot(model.weights, model.log_means))
    supercritical = Verdict(mu > 0, mu)

    a_witness = None
    for i, at in enumerate(atoms):
        h0 = float(np.real(at.immigration.pgf(0.0)))
        f = at.offspring.pmf(1)
        if h0 > 0 and f[0] > 0 and f[1] > 0:
            a_witness = {"atom": i, "h0": h0, "f0": float(f[0]), "f1": float(f[1])}
            break
    A = Verdict(a_witness is not None, a_witness)

    f0 = [float(at.offspring.pmf(0)[0]) for at in atoms]
    worst = int(np.argmax(f0))
    B = Verdict(f0[worst] < delta, {"atom": worst, "f0": f0[worst]})

    terms = [_condition_c_value(at, p, q) for at in atoms]
    w = model.weights
    off = float(np.dot(w, [t[0] for t in terms]))
    imm = float(np.dot(w, [t[1] for t in terms]))
    C = Verdict(math.isfinite(off) and math.isfinite(imm), {"offspring_moment": off, "immigration_moment": imm})

    lattice = _on_arithmetic_lattice(sorted(set(np.round(model.log_means, 12))))
    nonlattice = Verdict(not lattice, {"log_means": [float(x) for x in model.log_means]})

    return AssumptionReport(mu, supercritical, A, B, C, nonlattice, delta, p, q)
