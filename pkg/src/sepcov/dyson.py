"""Self-consistent equations for (m1c, m2c), the limiting Stieltjes transform m_c,
and densities obtained by Stieltjes inversion.

The pair solver works on the scalar unknown ``alpha = m2c``:

    m1c(alpha) = -(d/z) * K_A(alpha),   K_A(alpha) = sum_t w_t t / (1 + t alpha)
    F(alpha)   = -alpha + sum_s w_s s / (-z + s d K_A(alpha))

and ``m2c`` is the unique root of ``F`` whose pair ``(m1c, m2c)`` lies in the
upper half plane. Roots are tracked by eta-continuation; each level is
solved by guarded Newton, with damped Gauss-Seidel sweeps as the fallback.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .model import SpectralModel

_TINY = 1e-300
_SCALAR_ATOMS = 64


@dataclass(frozen=True)
class ComplexPoint:
    e: float
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError(f"spectral parameter needs Im z > 0, got eta={self.eta}")

    @property
    def z(self) -> complex:
        return complex(self.e, self.eta)

    def kappa(self, lambda_plus: float) -> float:
        return abs(self.e - lambda_plus)

    @classmethod
    def of(cls, z) -> "ComplexPoint":
        if isinstance(z, ComplexPoint):
            return z
        z = complex(z)
        return cls(z.real, z.imag)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-12
    max_iter: int = 10000
    damping: float = 1.0
    continuation_etas: tuple[float, ...] | None = None
    ladder_factor: float = 10.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    def ladder(self, eta: float) -> list[float]:
        """Descending eta levels ending exactly at ``eta``."""
        if self.continuation_etas is not None:
            levels = [e for e in self.continuation_etas if e > eta]
            return sorted(levels, reverse=True) + [eta]
        top = max(1.0, eta)
        levels = []
        cur = top
        while cur > eta * (1 + 1e-12):
            levels.append(cur)
            cur /= self.ladder_factor
        return levels + [eta]


@dataclass(frozen=True)
class DysonSolution:
    z: ComplexPoint
    m1c: complex
    m2c: complex
    mc: complex
    iterations: int
    residual: float


class _Kernels:
    """Vectorized atomic sums for one model."""

    def __init__(self, model: SpectralModel):
        self.d = model.d
        self.ta, self.wa = model.pi_a.t, model.pi_a.w
        self.tb, self.wb = model.pi_b.t, model.pi_b.w

    def ka(self, alpha, power=1):
        r = self.ta / (1.0 + np.multiply.outer(alpha, self.ta))
        return (r**power) @ self.wa

    def m1_of(self, z, alpha):
        return -(self.d / z) * self.ka(alpha)

    def m2_of(self, z, m1):
        return (self.tb / (-np.multiply.outer(z, np.ones_like(self.tb)) * (1.0 + np.multiply.outer(m1, self.tb)))) @ self.wb

    def mc_of(self, z, alpha):
        return (1.0 / (-np.multiply.outer(z, np.ones_like(self.ta)) * (1.0 + np.multiply.outer(alpha, self.ta)))) @ self.wa

    def residuals(self, z, alpha):
        """Relative residuals of both self-consistent equations."""
        m1 = self.m1_of(z, alpha)
        m2 = self.m2_of(z, m1)
        r1 = np.abs(m1 - self.d * ((self.ta / (-np.multiply.outer(z, np.ones_like(self.ta)) * (1.0 + np.multiply.outer(alpha, self.ta)))) @ self.wa))
        r2 = np.abs(alpha - m2)
        s1 = np.maximum(np.abs(m1), _TINY)
        s2 = np.maximum(np.abs(alpha), _TINY)
        return np.maximum(np.where(r1 == 0, 0.0, r1 / s1), np.where(r2 == 0, 0.0, r2 / s2))

    def newton_parts(self, z, alpha):
        ka = self.ka(alpha)
        ka2 = self.ka(alpha, 2)
        denom = -z[:, None] + np.multiply.outer(self.d * ka, self.tb)
        f = -alpha + (self.tb / denom) @ self.wb
        df = -1.0 + self.d * ka2 * ((self.tb**2 / denom**2) @ self.wb)
        return f, df


def _upper(m: np.ndarray) -> np.ndarray:
    # exact zeros occur for degenerate spectra (all atoms at 0)
    return (m.imag > 0) | (m == 0)


def _admissible(ker: _Kernels, z, alpha) -> np.ndarray:
    m1 = ker.m1_of(z, alpha)
    return _upper(alpha) & _upper(m1) & np.isfinite(alpha)


def _newton(ker: _Kernels, z, alpha, tol, max_steps=60):
    """Guarded Newton on F(alpha) = 0; returns (alpha, converged mask, steps)."""
    alpha = alpha.copy()
    done = np.zeros(alpha.shape, bool)
    steps = 0
    with np.errstate(all="ignore"):
        res = ker.residuals(z, alpha)
        done |= (res <= tol) & _admissible(ker, z, alpha)
        for _ in range(max_steps):
            act = ~done
            if not act.any():
                break
            steps += 1
            za, aa = z[act], alpha[act]
            f, df = ker.newton_parts(za, aa)
            step = -f / df
            fabs = np.abs(f)
            lam = np.ones(aa.shape)
            new = aa + step
            for _ in range(40):
                ok = _admissible(ker, za, new) & (np.abs(ker.newton_parts(za, new)[0]) < fabs * (1 - 1e-4 * lam) + 1e-300)
                if ok.all():
                    break
                lam = np.where(ok, lam, lam * 0.5)
                new = aa + lam * step
            stalled = lam < 1e-9
            alpha[act] = np.where(stalled, aa, new)
            res_act = ker.residuals(za, alpha[act])
            good = (res_act <= tol) & _admissible(ker, za, alpha[act])
            idx = np.flatnonzero(act)
            done[idx[good]] = True
            if (stalled & ~good).all():
                break
    return alpha, done, steps


def _gauss_seidel(ker: _Kernels, z, alpha, tol, max_iter, damping):
    """Damped alternating sweeps; damping halves after three rising residuals."""
    alpha = alpha.copy()
    omega = np.full(alpha.shape, float(damping))
    prev = np.full(alpha.shape, np.inf)
    rising = np.zeros(alpha.shape, int)
    done = np.zeros(alpha.shape, bool)
    it = 0
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            act = ~done
            if not act.any():
                break
            za, aa = z[act], alpha[act]
            m1 = ker.m1_of(za, aa)
            target = ker.m2_of(za, m1)
            alpha[act] = (1 - omega[act]) * aa + omega[act] * target
            res = ker.residuals(za, alpha[act])
            r_up = res > prev[act]
            rising[act] = np.where(r_up, rising[act] + 1, 0)
            halve = rising[act] >= 3
            om = omega[act]
            om[halve] *= 0.5
            omega[act] = om
            rr = rising[act]
            rr[halve] = 0
            rising[act] = rr
            prev[act] = res
            idx = np.flatnonzero(act)
            good = (res <= tol) & _admissible(ker, za, alpha[act])
            done[idx[good]] = True
    return alpha, done, it


def _solve_alpha(model: SpectralModel, zs: np.ndarray, cfg: SolverConfig, init=None):
    """Core vectorized solve. Returns (alpha, converged, iterations, residual)."""
    ker = _Kernels(model)
    zs = np.asarray(zs, dtype=complex)
    e, eta_t = zs.real, zs.imag
    total_iter = 0
    if init is not None:
        # warm start straight at the target; accepted only inside C_+^2 (unique there)
        alpha, done, steps = _newton(ker, zs, np.asarray(init, dtype=complex), cfg.tol)
        total_iter += steps
        if done.all():
            return alpha, done, total_iter, ker.residuals(zs, alpha)
        pending = ~done
    else:
        alpha = np.empty_like(zs)
        pending = np.ones(zs.shape, bool)
        done = np.zeros(zs.shape, bool)
    idx = np.flatnonzero(pending)
    if idx.size:
        sub_e, sub_eta = e[idx], eta_t[idx]
        levels = cfg.ladder(float(sub_eta.min()))
        first = np.maximum(levels[0], sub_eta)
        zl = sub_e + 1j * first
        a = -1.0 / zl
        a, ok, it = _gauss_seidel(ker, zl, a, cfg.tol, cfg.max_iter, cfg.damping)
        total_iter += it
        if not ok.all():
            a2, ok2, st = _newton(ker, zl, a, cfg.tol)
            total_iter += st
            a = np.where(ok, a, a2)
            ok |= ok2
        for lev in levels[1:]:
            zl = sub_e + 1j * np.maximum(lev, sub_eta)
            a_new, ok, st = _newton(ker, zl, a, cfg.tol)
            total_iter += st
            if not ok.all():
                a_fp, ok_fp, it = _gauss_seidel(ker, zl[~ok], a[~ok], cfg.tol, cfg.max_iter, cfg.damping)
                total_iter += it
                a_new[~ok] = a_fp
                ok[~ok] = ok_fp
            a = a_new
        alpha[idx] = a
        done[idx] = ok
    return alpha, done, total_iter, ker.residuals(zs, alpha)


class _ScalarKernels:
    """Pure-Python version of the atomic sums; fast for a handful of atoms."""

    def __init__(self, model: SpectralModel):
        self.d = model.d
        self.a = model.pi_a.atoms
        self.b = model.pi_b.atoms

    def m1(self, z, alpha):
        return -(self.d / z) * sum(w * t / (1 + t * alpha) for t, w in self.a)

    def f_df(self, z, alpha):
        ka = ka2 = 0j
        for t, w in self.a:
            r = t / (1 + t * alpha)
            ka += w * r
            ka2 += w * r * r
        f = -alpha
        g = 0j
        for s, w in self.b:
            den = -z + s * self.d * ka
            f += w * s / den
            g += w * s * s / (den * den)
        return f, -1 + self.d * ka2 * g

    def residual(self, z, alpha):
        m1 = self.m1(z, alpha)
        m2 = sum(w * s / (-z * (1 + s * m1)) for s, w in self.b)
        r1 = abs(m1 - self.d * sum(w * t / (-z * (1 + t * alpha)) for t, w in self.a))
        r2 = abs(alpha - m2)
        return max(r1 / abs(m1) if r1 else 0.0, r2 / abs(alpha) if r2 else 0.0)

    def admissible(self, z, alpha):
        if not (math.isfinite(alpha.real) and math.isfinite(alpha.imag)):
            return False
        m1 = self.m1(z, alpha)
        return (alpha.imag > 0 or alpha == 0) and (m1.imag > 0 or m1 == 0)


def _solve_scalar(model: SpectralModel, z: complex, cfg: SolverConfig):
    """Same algorithm as ``_solve_alpha`` for one point, without numpy overhead."""
    ker = _ScalarKernels(model)
    iters = 0

    def newton(zz, alpha):
        nonlocal iters
        for _ in range(60):
            try:
                if ker.residual(zz, alpha) <= cfg.tol and ker.admissible(zz, alpha):
                    return alpha, True
                f, df = ker.f_df(zz, alpha)
                step = -f / df
            except ZeroDivisionError:
                return alpha, False
            iters += 1
            lam = 1.0
            while lam > 1e-9:
                cand = alpha + lam * step
                try:
                    if ker.admissible(zz, cand) and abs(ker.f_df(zz, cand)[0]) < abs(f) * (1 - 1e-4 * lam) + 1e-300:
                        break
                except ZeroDivisionError:
                    pass
                lam *= 0.5
            else:
                return alpha, False
            alpha = cand
        return alpha, ker.residual(zz, alpha) <= cfg.tol and ker.admissible(zz, alpha)

    def gauss_seidel(zz, alpha):
        nonlocal iters
        omega, prev, rising = cfg.damping, math.inf, 0
        for _ in range(cfg.max_iter):
            iters += 1
            m1 = ker.m1(zz, alpha)
            target = sum(w * s / (-zz * (1 + s * m1)) for s, w in ker.b)
            alpha = (1 - omega) * alpha + omega * target
            res = ker.residual(zz, alpha)
            if res <= cfg.tol and ker.admissible(zz, alpha):
                return alpha, True
            rising = rising + 1 if res > prev else 0
            if rising >= 3:
                omega, rising = omega * 0.5, 0
            prev = res
        return alpha, False

    levels = cfg.ladder(z.imag)
    zz = complex(z.real, levels[0])
    alpha, ok = gauss_seidel(zz, -1 / zz)
    if not ok:
        alpha, ok = newton(zz, alpha)
    for lev in levels[1:]:
        zz = complex(z.real, max(lev, z.imag))
        cand, ok = newton(zz, alpha)
        if not ok:
            cand, ok = gauss_seidel(zz, alpha)
        alpha = cand
    res = ker.residual(z, alpha)
    return alpha, ok, iters, res


def _pack(model, z: ComplexPoint, alpha: complex, iterations: int, residual: float) -> DysonSolution:
    ker = _Kernels(model)
    zz = np.array([z.z])
    aa = np.array([alpha])
    m1 = ker.m1_of(zz, aa)[0]
    mc = ker.mc_of(zz, aa)[0]
    return DysonSolution(z, complex(m1), complex(alpha), complex(mc), iterations, float(residual))


def solve_at(model: SpectralModel, z, cfg: SolverConfig | None = None) -> DysonSolution:
    """Solve the coupled equations at one spectral point ``z`` (``Im z > 0``)."""
    cfg = cfg or SolverConfig()
    if isinstance(z, ComplexPoint):
        point = z
    else:
        zc = complex(z)
        if not zc.imag > 0:
            raise DomainError(f"spectral parameter needs Im z > 0, got {zc}")
        point = ComplexPoint(zc.real, zc.imag)
    if len(model.pi_a.values) + len(model.pi_b.values) <= _SCALAR_ATOMS:
        alpha, ok, iters, res = _solve_scalar(model, point.z, cfg)
    else:
        a, oks, iters, r = _solve_alpha(model, np.array([point.z]), cfg)
        alpha, ok, res = complex(a[0]), bool(oks[0]), float(r[0])
    if not ok:
        raise ConvergenceError(
            f"no convergence at z={point.z} after continuation (residual {res:.3e})",
            last=complex(alpha),
            residual=float(res),
        )
    return _pack(model, point, complex(alpha), iters, float(res))


@dataclass
class BatchSolution:
    """Solutions on an array of spectral points (NaN where unconverged)."""

    z: np.ndarray
    m1c: np.ndarray
    m2c: np.ndarray
    mc: np.ndarray
    converged: np.ndarray
    residual: np.ndarray


def solve_many(model: SpectralModel, zs, cfg: SolverConfig | None = None, init=None) -> BatchSolution:
    cfg = cfg or SolverConfig()
    zs = np.atleast_1d(np.asarray(zs, dtype=complex))
    if np.any(zs.imag <= 0):
        raise DomainError("all spectral parameters need Im z > 0")
    alpha, ok, _, res = _solve_alpha(model, zs, cfg, init=init)
    ker = _Kernels(model)
    m1 = ker.m1_of(zs, alpha)
    mc = ker.mc_of(zs, alpha)
    nan = complex(np.nan, np.nan)
    return BatchSolution(
        zs,
        np.where(ok, m1, nan),
        np.where(ok, alpha, nan),
        np.where(ok, mc, nan),
        ok,
        res,
    )


@dataclass
class DensityCurve:
    grid: np.ndarray
    rho_c: np.ndarray
    rho_1c: np.ndarray
    rho_2c: np.ndarray
    eta_used: float
    failed: list[int] = field(default_factory=list)

    def to_csv(self, path: str | Path, model: SpectralModel | None = None, tol: float | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["E", "rho_c", "rho_1c", "rho_2c"])
            for row in zip(self.grid, self.rho_c, self.rho_1c, self.rho_2c):
                writer.writerow([repr(float(v)) for v in row])
        meta = {
            "eta": self.eta_used,
            "tol": tol,
            "model_hash": model.model_hash() if model is not None else None,
            "points": int(self.grid.size),
            "failed_indices": self.failed,
        }
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        return path


def _clip_density(x: np.ndarray) -> np.ndarray:
    x = x / math.pi
    return np.where((x < 0) & (x >= -1e-10), 0.0, x)


def density_grid(
    model: SpectralModel,
    e_min: float,
    e_max: float,
    eta: float,
    points: int,
    cfg: SolverConfig | None = None,
) -> DensityCurve:
    """Densities ``Im m / pi`` of m_c, m1c, m2c on a uniform grid at height ``eta``."""
    if not e_min < e_max:
        raise ValueError("e_min must be smaller than e_max")
    if not eta > 0:
        raise DomainError("eta must be positive")
    if points < 2:
        raise ValueError("need at least two grid points")
    grid = np.linspace(e_min, e_max, int(points))
    sol = solve_many(model, grid + 1j * eta, cfg)
    failed = [int(i) for i in np.flatnonzero(~sol.converged)]
    return DensityCurve(
        grid,
        _clip_density(sol.mc.imag),
        _clip_density(sol.m1c.imag),
        _clip_density(sol.m2c.imag),
        float(eta),
        failed,
    )


def densities_at(model: SpectralModel, energies: Sequence[float], eta: float, cfg: SolverConfig | None = None):
    """(rho_c, rho_1c, rho_2c) at arbitrary real points; raises if any point fails."""
    energies = np.asarray(energies, dtype=float)
    sol = solve_many(model, energies + 1j * eta, cfg)
    if not sol.converged.all():
        bad = energies[~sol.converged]
        raise ConvergenceError(f"density solve failed at E={bad[:5]}", residual=float(np.nanmax(sol.residual)))
    return _clip_density(sol.mc.imag), _clip_density(sol.m1c.imag), _clip_density(sol.m2c.imag)


def _solve_vector(model: SpectralModel, z: complex, cfg: SolverConfig):
    """Newton on the per-atom vector equation ``1/v = -z + sigma * K_B(m1(v))``."""
    d = model.d
    sig, w = model.pi_a.t, model.pi_a.w
    sb, wb = model.pi_b.t, model.pi_b.w

    def parts(zz, v):
        m1 = d * np.dot(w * sig, v)
        kb = np.dot(wb, sb / (1 + sb * m1))
        kb2 = np.dot(wb, sb**2 / (1 + sb * m1) ** 2)
        F = 1 / v + zz - sig * kb
        J = -np.diag(1 / v**2) + np.outer(sig * kb2, d * w * sig)
        return F, J

    def ok(v):
        return np.all((v.imag > 0) | (v == 0)) and np.all(np.isfinite(v))

    levels = cfg.ladder(z.imag)
    # start high enough that -1/z is already close to the root, then walk eta down
    scale = max(1.0, abs(z.real), model.sigma_1 * model.tilde_sigma_1)
    levels = [h for h in (100 * scale, 30 * scale, 10 * scale, 3 * scale) if h > levels[0]] + list(levels)
    v = -np.ones(sig.size, complex) / complex(z.real, levels[0])
    iters = 0
    for lev in levels:
        zz = complex(z.real, max(lev, z.imag))
        for _ in range(200):
            F, J = parts(zz, v)
            nrm = np.max(np.abs(F * v))
            if nrm <= cfg.tol:
                break
            iters += 1
            step = np.linalg.solve(J, -F)
            lam = 1.0
            while lam > 1e-10:
                cand = v + lam * step
                if ok(cand) and np.max(np.abs(parts(zz, cand)[0] * cand)) < nrm:
                    break
                lam *= 0.5
            else:
                # far from the root Newton can fail to descend; a damped fixed-point step stays in C+
                m1 = d * np.dot(w * sig, v)
                cand = 0.5 * (v + 1 / (-zz + sig * np.dot(wb, sb / (1 + sb * m1))))
                if not ok(cand):
                    raise ConvergenceError(f"vector equation stalled at z={zz}", last=v, residual=nrm)
            v = cand
        else:
            raise ConvergenceError(f"vector equation did not converge at z={zz}", last=v, residual=nrm)
    m1 = d * np.dot(w * sig, v)
    m2 = np.dot(wb, sb / (-z * (1 + sb * m1)))
    mc = np.dot(w, v)
    return complex(m1), complex(m2), complex(mc), iters


def vector_dyson_check(model: SpectralModel, z, cfg: SolverConfig | None = None) -> float:
    """Largest |difference| in (m1c, m2c, m_c) between the vector and pair solvers."""
    cfg = cfg or SolverConfig()
    point = ComplexPoint.of(z)
    pair = solve_at(model, point, cfg)
    m1, m2, mc, _ = _solve_vector(model, point.z, cfg)
    return max(abs(m1 - pair.m1c), abs(m2 - pair.m2c), abs(mc - pair.mc))
