"""Population spectra of A and B, dimensions, and the atomic kernel integrals."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ModelError, SingularKernelError

POLE_THRESHOLD = 1e-14
WEIGHT_TOL = 1e-12


def _parse_real(value) -> float:
    # exact decimal strings go through Decimal so "0.1" and 0.1 land on the same float
    if isinstance(value, str):
        try:
            return float(Decimal(value.strip()))
        except InvalidOperation as exc:
            raise ModelError(f"cannot parse atom value {value!r}") from exc
    return float(value)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite atomic probability measure ``sum_k w_k delta_{t_k}``.

    Atoms are kept sorted by value, largest first, with duplicates merged.
    """

    values: tuple[float, ...]
    weights: tuple[float, ...]

    @classmethod
    def from_atoms(cls, atoms: Iterable[Sequence]) -> "AtomicMeasure":
        merged: dict[float, float] = {}
        count = 0
        for atom in atoms:
            if len(atom) != 2:
                raise ModelError(f"atom must be a (value, weight) pair, got {atom!r}")
            value, weight = _parse_real(atom[0]), _parse_real(atom[1])
            if not (math.isfinite(value) and math.isfinite(weight)):
                raise ModelError("atom values and weights must be finite")
            if value < 0:
                raise ModelError(f"negative atom value {value}")
            if weight <= 0:
                raise ModelError(f"atom weight must be positive, got {weight}")
            merged[value] = merged.get(value, 0.0) + weight
            count += 1
        if count == 0:
            raise ModelError("empty atom list")
        total = math.fsum(merged.values())
        if total <= 0:
            raise ModelError("zero total weight")
        values = sorted(merged, reverse=True)
        weights = [merged[v] for v in values]
        if abs(total - 1.0) > WEIGHT_TOL:
            weights = [w / total for w in weights]
        return cls(tuple(values), tuple(weights))

    @classmethod
    def point(cls, value: float) -> "AtomicMeasure":
        return cls.from_atoms([(value, 1.0)])

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values, self.weights))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def max_atom(self) -> float:
        return self.values[0]

    @property
    def min_atom(self) -> float:
        return self.values[-1]

    def mean(self) -> float:
        return float(self.w @ self.t)

    def mass_below(self, x: float) -> float:
        """Mass of the closed interval ``[0, x]``."""
        return math.fsum(w for v, w in self.atoms if v <= x)

    def scaled(self, c: float) -> "AtomicMeasure":
        return AtomicMeasure.from_atoms([(c * v, w) for v, w in self.atoms])

    def expand(self, size: int) -> np.ndarray:
        """Diagonal of length ``size`` whose empirical law approximates the measure.

        Counts are ``size * w`` rounded by largest remainder, so the result is
        exact whenever every ``size * w`` is an integer.
        """
        raw = np.asarray(self.weights) * size
        counts = np.floor(raw + 1e-9).astype(int)
        short = size - counts.sum()
        if short > 0:
            order = np.argsort(-(raw - counts), kind="stable")
            counts[order[:short]] += 1
        return np.repeat(np.asarray(self.values), counts)


@dataclass(frozen=True)
class SpectralModel:
    """Spectral data of a separable covariance model ``A^{1/2} X B X^* A^{1/2}``.

    ``pi_a`` is the spectral law of the n x n matrix A, ``pi_b`` that of the
    N x N matrix B. Construction guarantees ``n <= big_n``; when the caller
    supplies ``n > big_n`` the two sides are exchanged (the old A spectrum is
    scaled by n/N to keep the entry variance at 1/N) and ``swapped`` is set.
    The nonzero spectrum is unchanged by the exchange.
    """

    pi_a: AtomicMeasure
    pi_b: AtomicMeasure
    n: int
    big_n: int
    swapped: bool = False
    d: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "d", self.n / self.big_n)

    @property
    def sigma_1(self) -> float:
        return self.pi_a.max_atom

    @property
    def tilde_sigma_1(self) -> float:
        return self.pi_b.max_atom

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "N": self.big_n,
            "atoms_a": [[v, w] for v, w in self.pi_a.atoms],
            "atoms_b": [[v, w] for v, w in self.pi_b.atoms],
            "swapped": self.swapped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def model_hash(self) -> str:
        payload = json.dumps(
            {k: v for k, v in self.to_dict().items() if k != "swapped"}, sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def diag_a(self) -> np.ndarray:
        return self.pi_a.expand(self.n)

    def diag_b(self) -> np.ndarray:
        return self.pi_b.expand(self.big_n)

    def with_scaled_a(self, c: float) -> "SpectralModel":
        return SpectralModel(self.pi_a.scaled(c), self.pi_b, self.n, self.big_n, self.swapped)


def build_model(atoms_a, atoms_b, n: int, big_n: int) -> SpectralModel:
    """Normalize both spectra and fix the orientation so that ``d = n/N <= 1``."""
    if int(n) != n or int(big_n) != big_n or n < 1 or big_n < 1:
        raise ModelError(f"dimensions must be positive integers, got n={n}, N={big_n}")
    pi_a = atoms_a if isinstance(atoms_a, AtomicMeasure) else AtomicMeasure.from_atoms(atoms_a)
    pi_b = atoms_b if isinstance(atoms_b, AtomicMeasure) else AtomicMeasure.from_atoms(atoms_b)
    n, big_n = int(n), int(big_n)
    if n > big_n:
        # the transpose has entries of variance 1/N = (n/N) * (1/n), absorbed into the new B side
        return SpectralModel(pi_b, pi_a.scaled(n / big_n), big_n, n, swapped=True)
    return SpectralModel(pi_a, pi_b, n, big_n)


def null_model(n: int, big_n: int) -> SpectralModel:
    """Identity covariances on both sides (plain Marchenko-Pastur)."""
    return build_model([(1, 1)], [(1, 1)], n, big_n)


def model_from_dict(doc: dict) -> SpectralModel:
    try:
        model = build_model(doc["atoms_a"], doc["atoms_b"], doc["n"], doc["N"])
    except KeyError as exc:
        raise ModelError(f"model document is missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    if doc.get("swapped") and not model.swapped:
        object.__setattr__(model, "swapped", True)
    return model


def load_model(path: str | Path) -> SpectralModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ModelError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: SpectralModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")


def kernel_integral(measure: AtomicMeasure, alpha):
    """``sum_t w_t * t / (1 + t*alpha)``; accepts a scalar or an array of alphas."""
    t = measure.t
    a = np.asarray(alpha)
    denom = 1.0 + np.multiply.outer(a, t)
    if np.any(np.abs(denom) < POLE_THRESHOLD):
        k = int(np.argmin(np.abs(denom).reshape(-1, t.size).min(axis=0)))
        raise SingularKernelError(
            f"pole collision: |1 + t*alpha| below {POLE_THRESHOLD} at atom t={t[k]}",
            atom=float(t[k]),
        )
    out = (t / denom) @ measure.w
    if np.ndim(alpha) == 0:
        return out.item()
    return out


@dataclass
class ValidationReport:
    tau: float
    checks: dict[str, bool]
    margins: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"tau": self.tau, "passed": self.passed, "checks": self.checks, "margins": self.margins}


def validate_structure(model: SpectralModel, tau: float) -> ValidationReport:
    """Check operator-norm bound, non-concentration at zero, and the aspect ratio."""
    if not 0 < tau < 1:
        raise ModelError(f"tau must lie in (0, 1), got {tau}")
    bound = 1.0 / tau
    mass_a = model.pi_a.mass_below(tau)
    mass_b = model.pi_b.mass_below(tau)
    checks = {
        "norm_a": model.sigma_1 <= bound,
        "norm_b": model.tilde_sigma_1 <= bound,
        "mass_a_near_zero": mass_a <= 1 - tau,
        "mass_b_near_zero": mass_b <= 1 - tau,
        "aspect_ratio": tau <= model.d <= 1,
    }
    margins = {
        "norm_a": bound - model.sigma_1,
        "norm_b": bound - model.tilde_sigma_1,
        "mass_a_near_zero": (1 - tau) - mass_a,
        "mass_b_near_zero": (1 - tau) - mass_b,
        "aspect_ratio": model.d - tau,
    }
    return ValidationReport(tau, checks, margins)
