"""Deterministic resolvent limit, control parameter, and empirical local-law probes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dyson import DysonSolution, SolverConfig, solve_at
from .edge import ClassicalLocations, EdgeReport
from .ensemble import SampleSpectrum
from .errors import PreconditionError, SingularPiError
from .model import SpectralModel

PI_GAP = 1e-10


def deterministic_limit_pi(model: SpectralModel, solution: DysonSolution) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal of Pi per atom: upper -1/(1 + m2c s_i), lower -1/(z (1 + m1c s~_mu))."""
    z = solution.z.z
    ua = 1.0 + solution.m2c * model.pi_a.t
    ub = 1.0 + solution.m1c * model.pi_b.t
    if np.min(np.abs(ua)) < PI_GAP or np.min(np.abs(ub)) < PI_GAP:
        raise SingularPiError("1 + m*sigma vanishes for some atom; Pi is singular")
    return -1.0 / ua, -1.0 / (z * ub)


def pi_diagonal(model: SpectralModel, solution: DysonSolution, sigma_a, sigma_b) -> np.ndarray:
    """Full (n + N)-diagonal of Pi for explicit diagonal entries of A and B."""
    z = solution.z.z
    ua = 1.0 + solution.m2c * np.asarray(sigma_a)
    ub = 1.0 + solution.m1c * np.asarray(sigma_b)
    if np.min(np.abs(ua)) < PI_GAP or np.min(np.abs(ub)) < PI_GAP:
        raise SingularPiError("1 + m*sigma vanishes for some entry; Pi is singular")
    return np.concatenate([-1.0 / ua, -1.0 / (z * ub)])


def control_psi(solution: DysonSolution, big_n: int) -> float:
    """Psi = sqrt(Im m2c / (N eta)) + 1 / (N eta)."""
    ne = big_n * solution.z.eta
    return math.sqrt(max(solution.m2c.imag, 0.0) / ne) + 1.0 / ne


def empirical_stieltjes(spectrum: SampleSpectrum, z) -> complex:
    """(1/n) sum 1/(lambda_i - z), counting the implicit zero eigenvalues."""
    z = complex(getattr(z, "z", z))
    lam = np.asarray(spectrum.eigenvalues)
    zeros = spectrum.n - lam.size
    return complex((np.sum(1.0 / (lam - z)) + zeros * (-1.0 / z)) / spectrum.n)


def spectral_resolvent(spectrum: SampleSpectrum, z) -> np.ndarray:
    """Dense (n+N) x (n+N) linearized resolvent assembled from the singular vectors."""
    _need_vectors(spectrum)
    z = complex(getattr(z, "z", z))
    n, big_n = spectrum.n, spectrum.big_n
    lam = np.asarray(spectrum.eigenvalues)
    lam_b = np.concatenate([lam, np.zeros(big_n - lam.size)])
    xi, zeta = spectrum.xi, spectrum.zeta
    g = np.empty((n + big_n, n + big_n), complex)
    g[:n, :n] = (xi * (z / (lam - z))) @ xi.T
    g[n:, n:] = (zeta * (1.0 / (lam_b - z))) @ zeta.T
    off = (xi * (np.sqrt(lam) / (lam - z))) @ zeta[:, : lam.size].T
    g[:n, n:] = off
    g[n:, :n] = off.T
    return g


def dense_resolvent(m: np.ndarray, z) -> np.ndarray:
    """Direct inverse of [[-I, M], [M^T, -z I]]."""
    z = complex(getattr(z, "z", z))
    n, big_n = m.shape
    h = np.zeros((n + big_n, n + big_n), complex)
    h[:n, n:] = m
    h[n:, :n] = m.T
    h[:n, :n] -= np.eye(n)
    h[n:, n:] -= z * np.eye(big_n)
    return np.linalg.inv(h)


def _need_vectors(spectrum: SampleSpectrum) -> None:
    if spectrum.xi is None or spectrum.zeta is None:
        raise PreconditionError("spectrum was sampled without singular vectors (keep_vectors=False)")


def _bilinear(spectrum: SampleSpectrum, z: complex, u: np.ndarray, v: np.ndarray) -> complex:
    """<u, G v> through the spectral representation, O((n+N)^2) without forming G."""
    n = spectrum.n
    lam = np.asarray(spectrum.eigenvalues)
    k = lam.size
    lam_b = np.concatenate([lam, np.zeros(spectrum.big_n - k)])
    a_u, b_u = spectrum.xi.T @ u[:n], spectrum.zeta.T @ u[n:]
    a_v, b_v = spectrum.xi.T @ v[:n], spectrum.zeta.T @ v[n:]
    root = np.sqrt(lam) / (lam - z)
    return complex(
        np.sum(a_u * a_v * z / (lam - z))
        + np.sum(b_u * b_v / (lam_b - z))
        + np.sum(a_u * b_v[:k] * root)
        + np.sum(b_u[:k] * a_v * root)
    )


@dataclass
class ProbeReport:
    kind: str
    z: list
    errors: np.ndarray  # replicas x points (or points)
    envelopes: np.ndarray
    c: float
    eps: float
    big_n: int
    formula: str
    notes: list[str] = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        return self.errors / self.envelopes

    @property
    def threshold(self) -> np.ndarray:
        return self.c * self.big_n**self.eps * self.envelopes

    @property
    def passed(self) -> np.ndarray:
        return self.errors <= self.threshold

    def pass_fraction(self) -> float:
        return float(np.mean(self.passed))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "z": [[complex(p).real, complex(p).imag] for p in self.z],
            "errors": np.asarray(self.errors).tolist(),
            "envelopes": np.asarray(self.envelopes).tolist(),
            "ratios": np.asarray(self.ratios).tolist(),
            "C": self.c,
            "eps": self.eps,
            "N": self.big_n,
            "envelope_formula": self.formula,
            "pass_fraction": self.pass_fraction(),
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def rows(self) -> list[list]:
        """Flat (replica, z_index, E, eta, error, envelope, ratio, pass) table."""
        err = np.atleast_2d(self.errors)
        env = np.broadcast_to(self.envelopes, err.shape)
        ok = np.broadcast_to(self.passed, err.shape)
        out = []
        for r in range(err.shape[0]):
            for j in range(err.shape[1]):
                zz = complex(self.z[j]) if j < len(self.z) else complex("nan")
                out.append([r, j, zz.real, zz.imag, err[r, j], env[r, j], err[r, j] / env[r, j], bool(ok[r, j])])
        return out


def averaged_envelope(e: float, eta: float, lambda_plus: float, big_n: int, eps: float) -> float:
    kappa = abs(e - lambda_plus)
    if e >= lambda_plus and big_n * eta * math.sqrt(kappa + eta) >= big_n**eps:
        return 1.0 / (big_n * (kappa + eta)) + 1.0 / ((big_n * eta) ** 2 * math.sqrt(kappa + eta))
    return 1.0 / (big_n * eta)


def averaged_law_probe(
    model: SpectralModel,
    spectra: list[SampleSpectrum],
    zs,
    lambda_plus: float,
    c: float = 10.0,
    eps: float = 0.1,
    c0: float = 0.5,
    big_c0: float = 2.0,
    cfg: SolverConfig | None = None,
) -> ProbeReport:
    """|m - m_c| per replica and z, against (N eta)^{-1} inside / the sharper bound outside."""
    big_n = model.big_n
    kept, envs, mcs, notes = [], [], [], []
    for z in zs:
        z = complex(getattr(z, "z", z))
        e, eta = z.real, z.imag
        if not (lambda_plus - c0 <= e <= big_c0 * lambda_plus and big_n ** (-1 + eps) <= eta <= 1.0):
            notes.append(f"skipped z={z}: outside the probe domain")
            continue
        kept.append(z)
        envs.append(averaged_envelope(e, eta, lambda_plus, big_n, eps))
        mcs.append(solve_at(model, z, cfg).mc)
    errors = np.array([[abs(empirical_stieltjes(s, z) - mc) for z, mc in zip(kept, mcs)] for s in spectra])
    formula = "inside: (N eta)^-1; outside: N^-1 (kappa+eta)^-1 + (N eta)^-2 (kappa+eta)^-1/2"
    return ProbeReport("averaged", kept, errors, np.array(envs), c, eps, big_n, formula, notes)


def random_unit_vectors(dim: int, count: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def anisotropic_probe(
    model: SpectralModel,
    spectrum: SampleSpectrum,
    z,
    num_vector_pairs: int,
    seed,
    q: float | None = None,
    c: float = 10.0,
    eps: float = 0.1,
    cfg: SolverConfig | None = None,
) -> ProbeReport:
    """max over seeded unit pairs (u, v) of |<u, (G - Pi) v>| against q + Psi."""
    _need_vectors(spectrum)
    z = complex(getattr(z, "z", z))
    sol = solve_at(model, z, cfg)
    pi = pi_diagonal(model, sol, spectrum.sigma_a, spectrum.sigma_b)
    dim = spectrum.n + spectrum.big_n
    vecs = random_unit_vectors(dim, 2 * num_vector_pairs, seed)
    worst = 0.0
    for u, v in zip(vecs[0::2], vecs[1::2]):
        err = abs(_bilinear(spectrum, z, u, v) - np.sum(u * pi * v))
        worst = max(worst, err)
    q = model.big_n ** -0.5 if q is None else q
    env = q + control_psi(sol, model.big_n)
    return ProbeReport("anisotropic", [z], np.array([worst]), np.array([env]), c, eps, model.big_n, "q + Psi")


def rigidity_probe(
    spectrum: SampleSpectrum,
    locations: ClassicalLocations,
    j_range: tuple[int, int],
    c: float = 10.0,
    eps: float = 0.0,
) -> ProbeReport:
    """|lambda_j - gamma_j| j^{1/3} N^{2/3} for j in the inclusive range (1-based)."""
    lo, hi = j_range
    if not 1 <= lo <= hi <= min(locations.j_max, spectrum.eigenvalues.size):
        raise PreconditionError(f"j_range {j_range} outside the computed locations")
    j = np.arange(lo, hi + 1)
    lam = np.asarray(spectrum.eigenvalues)[j - 1]
    gam = locations.gammas[j - 1]
    scaled = np.abs(lam - gam) * j ** (1.0 / 3.0) * spectrum.big_n ** (2.0 / 3.0)
    rep = ProbeReport("rigidity", [], np.array([scaled.max()]), np.array([1.0]), c, eps, spectrum.big_n,
                      "|lambda_j - gamma_j| j^(1/3) N^(2/3)")
    rep.notes.append(json.dumps({"quantiles": np.quantile(scaled, [0.5, 0.9, 0.99]).tolist(), "argmax_j": int(j[scaled.argmax()])}))
    return rep


def delocalization_probe(
    spectrum: SampleSpectrum,
    edge: EdgeReport,
    num_vectors: int,
    seed,
    window_c1: float,
    locations: ClassicalLocations | None = None,
    c: float = 20.0,
) -> ProbeReport:
    """max |<u, xi_k>|^2 + |<v, zeta_k>|^2 over edge-window k and seeded unit u, v."""
    _need_vectors(spectrum)
    n, big_n = spectrum.n, spectrum.big_n
    ref = locations.gammas if locations is not None else np.asarray(spectrum.eigenvalues)
    ks = np.flatnonzero(ref >= edge.lambda_plus - window_c1)
    ks = ks[ks < spectrum.eigenvalues.size]
    us = random_unit_vectors(n, num_vectors, np.random.SeedSequence(seed, spawn_key=(0,)))
    vs = random_unit_vectors(big_n, num_vectors, np.random.SeedSequence(seed, spawn_key=(1,)))
    if ks.size == 0:
        worst = 0.0
    else:
        ou = (us @ spectrum.xi[:, ks]) ** 2
        ov = (vs @ spectrum.zeta[:, ks]) ** 2
        worst = float(np.max(ou + ov))
    env = math.log(big_n) / big_n
    rep = ProbeReport("delocalization", [], np.array([worst]), np.array([env]), c, 0.0, big_n, "log(N)/N")
    rep.notes.append(f"{ks.size} eigenvectors in the window")
    return rep
