"""Support, rightmost edge, edge constants and classical eigenvalue locations.

For real ``x`` and real ``alpha`` the edge function is

    f(x, alpha) = -alpha + sum_s w_s s / (-x + s d K_A(alpha)),

whose zero set in ``alpha`` is ``m2c(x)`` outside the support. Edges are the
critical values of the branches ``x(alpha)`` defined by ``f = 0``; the
rightmost edge lives on the branch ``alpha in (-1/sigma_1, 0)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .dyson import SolverConfig, solve_many
from .errors import (
    BracketError,
    DegenerateEdgeError,
    EdgeSearchError,
    QuantileExhaustedError,
    SingularKernelError,
)
from .model import POLE_THRESHOLD, SpectralModel

SCAN_POINTS = 512
POLE_STANDOFF = 1e-9
_VECTOR_ATOMS = 64


class _Sums:
    """Real atomic sums ``sum w t^k / (1 + t alpha)^k`` for one measure."""

    def __init__(self, values, weights):
        self.atoms = [(float(t), float(w)) for t, w in zip(values, weights)]
        self.t = np.asarray(values, float)
        self.w = np.asarray(weights, float)
        self.vector = len(self.atoms) > _VECTOR_ATOMS

    def check(self, alpha: float) -> None:
        for t, _ in self.atoms:
            if abs(1.0 + t * alpha) < POLE_THRESHOLD:
                raise SingularKernelError(f"pole collision 1 + t*alpha = 0 at atom t={t}", atom=t)

    def k123(self, alpha: float):
        self.check(alpha)
        if self.vector:
            r = self.t / (1.0 + self.t * alpha)
            return float(self.w @ r), float(self.w @ r**2), float(self.w @ r**3)
        k1 = k2 = k3 = 0.0
        for t, w in self.atoms:
            r = t / (1.0 + t * alpha)
            k1 += w * r
            k2 += w * r * r
            k3 += w * r * r * r
        return k1, k2, k3


class _EdgeFunction:
    def __init__(self, model: SpectralModel):
        self.model = model
        self.d = model.d
        self.a = _Sums(model.pi_a.values, model.pi_a.weights)
        self.b_atoms = [(float(s), float(w)) for s, w in model.pi_b.atoms]
        self.b_pos = sorted({s for s, _ in self.b_atoms if s > 0})
        self.mean_b = sum(s * w for s, w in self.b_atoms)

    def f(self, x: float, alpha: float) -> float:
        ka = self.a.k123(alpha)[0]
        c = self.d * ka
        total = -alpha
        for s, w in self.b_atoms:
            total += w * s / (-x + s * c)
        return total

    def df_dx(self, x: float, alpha: float) -> float:
        c = self.d * self.a.k123(alpha)[0]
        return sum(w * s / (-x + s * c) ** 2 for s, w in self.b_atoms)

    def all_derivatives(self, x: float, alpha: float):
        """(f, df/dalpha, df/dz, d2f/dalpha2) through g(z, alpha) and its alpha-derivatives."""
        k1, k2, k3 = self.a.k123(alpha)
        z = x
        g = -self.d * k1 / z
        dg = self.d * k2 / z
        d2g = -2.0 * self.d * k3 / z
        f = -alpha
        fa = -1.0
        fz = 0.0
        faa = 0.0
        for s, w in self.b_atoms:
            one = 1.0 + s * g
            if abs(one) < POLE_THRESHOLD:
                raise SingularKernelError(f"pole collision 1 + s*g = 0 at B atom s={s}", atom=s)
            f += w * s / (-z * one)
            fa += w * s * s * dg / (z * one**2)
            fz += w * s / (z * z * one**2)
            faa += w * (-2.0 * s**3 * dg * dg / (z * one**3) + s * s * d2g / (z * one**2))
        return f, fa, fz, faa

    def d_alpha(self, x: float, alpha: float) -> float:
        k1, k2, _ = self.a.k123(alpha)
        c = self.d * k1
        return -1.0 + self.d * k2 * sum(w * s * s / (-x + s * c) ** 2 for s, w in self.b_atoms)

    def cross(self, x: float, alpha: float) -> float:
        """d^2 f / (dx dalpha)."""
        k1, k2, _ = self.a.k123(alpha)
        c = self.d * k1
        return 2.0 * self.d * k2 * sum(w * s * s / (-x + s * c) ** 3 for s, w in self.b_atoms)

    def slots(self, alpha: float):
        """Brackets ``(lo, hi)`` of every real root x of f(., alpha), ascending."""
        c = self.d * self.a.k123(alpha)[0]
        poles = sorted({s * c for s in self.b_pos})
        if not poles:
            return []
        out = []
        if alpha > 0:
            out.append((poles[0] - 2.0 * self.mean_b / alpha, poles[0]))
        out.extend(zip(poles[:-1], poles[1:]))
        if alpha < 0:
            out.append((poles[-1], poles[-1] + 2.0 * self.mean_b / -alpha))
        return out

    def root(self, alpha: float, lo: float, hi: float) -> float:
        """Root of the increasing function x -> f(x, alpha) strictly inside (lo, hi)."""
        a, b = lo, hi
        x = 0.5 * (a + b)
        for _ in range(200):
            fx = self.f(x, alpha)
            if fx > 0:
                b = x
            elif fx < 0:
                a = x
            else:
                return x
            slope = self.df_dx(x, alpha)
            nx = x - fx / slope if slope > 0 else None
            if nx is None or not a < nx < b:
                nx = 0.5 * (a + b)
            if abs(nx - x) <= 4e-16 * max(abs(x), 1e-300):
                return nx
            x = nx
        return x


def f_and_derivatives(model: SpectralModel, x: float, alpha: float):
    """Return ``(f, df_dalpha, df_dz, d2f_dalpha2)`` at real ``(x, alpha)``."""
    return _EdgeFunction(model).all_derivatives(float(x), float(alpha))


def z_of_alpha(model: SpectralModel, alpha: float, bracket: tuple[float, float]) -> float:
    """Real root of ``f(x, alpha) = 0`` inside ``bracket`` (bisection + Newton)."""
    ef = _EdgeFunction(model)
    lo, hi = map(float, bracket)
    flo, fhi = ef.f(lo, alpha), ef.f(hi, alpha)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if flo * fhi > 0:
        raise BracketError(f"f(., {alpha}) has no sign change on [{lo}, {hi}]")
    sign = 1.0 if fhi > 0 else -1.0
    a, b = lo, hi
    x = 0.5 * (a + b)
    scale = max(abs(alpha), 1.0)
    for _ in range(300):
        fx = ef.f(x, alpha)
        if abs(fx) <= 1e-12 * scale and b - a < 1e-6 * max(abs(x), 1.0):
            return x
        if sign * fx > 0:
            b = x
        else:
            a = x
        slope = ef.df_dx(x, alpha)
        nx = x - fx / slope if slope != 0 else 0.5 * (a + b)
        if not a < nx < b:
            nx = 0.5 * (a + b)
        if nx == x:
            return x
        x = nx
    return x


@dataclass
class EdgeReport:
    lambda_plus: float
    alpha_star: float
    m1c_edge: float
    gamma0: float
    sqrt_coeff_2c: float
    sqrt_coeff_c: float
    support: list[tuple[float, float]]
    gap_margin_a: float
    gap_margin_b: float
    ik_jk: dict[str, float]
    regular: bool
    residual_f: float
    residual_df: float
    model_hash: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["support"] = [list(iv) for iv in self.support]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _branch_grid(lo: float, hi: float, points: int) -> np.ndarray:
    """Uniform points in (lo, hi) plus log clusters toward both ends."""
    span = hi - lo
    eps = POLE_STANDOFF * span
    uni = np.linspace(lo + eps, hi - eps, points)
    k = max(points // 8, 8)
    offs = span * np.logspace(math.log10(POLE_STANDOFF), -2, k)
    return np.unique(np.concatenate([uni, lo + offs, hi - offs]))


def _rightmost_branch(ef: _EdgeFunction, alpha: float) -> float:
    lo, hi = ef.slots(alpha)[-1]
    return ef.root(alpha, lo, hi)


def _refine_critical(ef: _EdgeFunction, a_lo: float, a_hi: float, slot_of):
    """Critical point of x(alpha) inside [a_lo, a_hi], then a joint Newton polish."""

    def h(a):
        return ef.d_alpha(slot_of(a), a)

    alpha = brentq(h, a_lo, a_hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    x = slot_of(alpha)
    for _ in range(5):
        f = ef.f(x, alpha)
        fa = ef.d_alpha(x, alpha)
        if abs(f) < 1e-15 and abs(fa) < 1e-15:
            break
        fx = ef.df_dx(x, alpha)
        fxa = ef.cross(x, alpha)
        faa = ef.all_derivatives(x, alpha)[3]
        det = fx * faa - fa * fxa
        if det == 0:
            break
        dx = -(f * faa - fa * fa) / det
        da = -(fx * fa - fxa * f) / det
        nx, na = x + dx, alpha + da
        if not (a_lo <= na <= a_hi):
            break
        if abs(ef.f(nx, na)) + abs(ef.d_alpha(nx, na)) >= abs(f) + abs(fa):
            break
        x, alpha = nx, na
    return x, alpha


def _rightmost_critical(model: SpectralModel):
    ef = _EdgeFunction(model)
    if not ef.b_pos or model.sigma_1 <= 0:
        raise EdgeSearchError("degenerate spectra: A or B has no positive atom")
    grid = _branch_grid(-1.0 / model.sigma_1, 0.0, SCAN_POINTS)
    xs = np.array([_rightmost_branch(ef, a) for a in grid])
    h = np.array([ef.d_alpha(x, a) for x, a in zip(xs, grid)])
    # d_alpha f = -x'(alpha) * df/dx, so the first + -> - change from the right is the edge
    changes = np.flatnonzero((h[:-1] > 0) & (h[1:] <= 0))
    if changes.size == 0:
        raise EdgeSearchError(
            "no critical point on the rightmost branch",
            scan={"alpha": grid.tolist(), "x": xs.tolist(), "d_alpha_f": h.tolist()},
        )
    k = changes[-1]
    x, alpha = _refine_critical(ef, grid[k], grid[k + 1], lambda a: _rightmost_branch(ef, a))
    return ef, x, alpha, (grid, xs, h)


def _ik_jk(model: SpectralModel, lam: float, alpha: float, m1: float) -> dict[str, float]:
    d = model.d
    ta, wa = model.pi_a.t, model.pi_a.w
    tb, wb = model.pi_b.t, model.pi_b.w
    ua = 1.0 + ta * alpha
    ub = 1.0 + tb * m1
    out = {
        # d-weighted like I2, I3; see README "Edge constants"
        "I1": float(d * wa @ (ta / (lam * ua**2))),
        "J1": float(wb @ (tb / (lam**2 * ub**2))),
    }
    for k in (2, 3):
        out[f"I{k}"] = float(d * wa @ (ta**k / (lam * ua**k)))
        out[f"J{k}"] = float(wb @ (tb**k / (lam * ub**k)))
    return out


def scaling_constant(model: SpectralModel, edge: EdgeReport) -> float:
    """Cube-root rescaling constant gamma0 so that gamma0 N^{2/3} (lambda_1 - lambda_+) is O(1)."""
    if edge.gap_margin_a <= 0 or edge.gap_margin_b <= 0:
        raise DegenerateEdgeError("edge is not regular (non-positive gap margin)")
    s = _ik_jk(model, edge.lambda_plus, edge.alpha_star, edge.m1c_edge)
    edge.ik_jk = s
    num = s["I1"] ** 2 * s["J1"]
    den = s["I2"] ** 2 * s["J3"] + s["I3"] * s["J2"]
    if not (num > 0 and den > 0):
        raise DegenerateEdgeError(f"non-positive cube argument {num}/{den}")
    return (num / den) ** (1.0 / 3.0)


def sqrt_coefficient(model: SpectralModel, edge: EdgeReport) -> float:
    """Coefficient a2 in rho_2c(lambda_+ - x) ~ a2 sqrt(x)."""
    _, _, fz, faa = f_and_derivatives(model, edge.lambda_plus, edge.alpha_star)
    if not (-faa > 1e-14 * max(1.0, abs(fz))) or fz <= 0:
        raise DegenerateEdgeError(f"degenerate edge: d2f/dalpha2={faa}, df/dz={fz}")
    return math.sqrt(2.0 * fz / -faa) / math.pi


def _sqrt_coeff_c(model: SpectralModel, lam: float, alpha: float, a2: float) -> float:
    # rho_c inherits the root from m2c through d m_c / d m2c = sum w t / (lam (1 + t alpha)^2)
    ta, wa = model.pi_a.t, model.pi_a.w
    return float(a2 * (wa @ (ta / (lam * (1.0 + ta * alpha) ** 2))))


def find_rightmost_edge(model: SpectralModel, tau: float = 0.1, with_support: bool = True) -> EdgeReport:
    """Locate lambda_+ and fill all edge constants."""
    ef, lam, alpha, _ = _rightmost_critical(model)
    m1 = float(model.d * (model.pi_a.w @ (model.pi_a.t / (-lam * (1.0 + model.pi_a.t * alpha)))))
    gap_a = float(np.min(1.0 + alpha * model.pi_a.t))
    gap_b = float(np.min(1.0 + m1 * model.pi_b.t))
    regular = gap_a >= tau and gap_b >= tau
    report = EdgeReport(
        lambda_plus=float(lam),
        alpha_star=float(alpha),
        m1c_edge=m1,
        gamma0=float("nan"),
        sqrt_coeff_2c=float("nan"),
        sqrt_coeff_c=float("nan"),
        support=[],
        gap_margin_a=gap_a,
        gap_margin_b=gap_b,
        ik_jk={},
        regular=regular,
        residual_f=abs(ef.f(lam, alpha)),
        residual_df=abs(ef.d_alpha(lam, alpha)),
        model_hash=model.model_hash(),
    )
    if not regular:
        report.notes.append(f"non-regular edge: gap margins ({gap_a:.3g}, {gap_b:.3g}) below tau={tau}")
    try:
        report.gamma0 = scaling_constant(model, report)
        report.sqrt_coeff_2c = sqrt_coefficient(model, report)
        report.sqrt_coeff_c = _sqrt_coeff_c(model, lam, alpha, report.sqrt_coeff_2c)
    except DegenerateEdgeError as exc:
        report.notes.append(str(exc))
    if with_support:
        support, flags = _support_from_candidates(model, lam)
        report.support = support
        report.notes.extend(flags)
    return report


def _branch_ranges(model: SpectralModel):
    poles = sorted({-1.0 / t for t in model.pi_a.values if t > 0})
    spacing = min((b - a for a, b in zip(poles[:-1], poles[1:])), default=1.0 / model.sigma_1)
    ranges = []
    left = poles[0]
    ranges.append(("log_left", left, spacing))
    ranges.extend(("bounded", a, b) for a, b in zip(poles[:-1], poles[1:]))
    ranges.append(("bounded", poles[-1], 0.0))
    ranges.append(("log_right", 0.0, 1.0 / model.sigma_1))
    return ranges


def _critical_values(model: SpectralModel) -> tuple[list[float], list[str]]:
    ef = _EdgeFunction(model)
    values: list[float] = []
    flags: list[str] = []
    for kind, a, b in _branch_ranges(model):
        if kind == "bounded":
            grid = _branch_grid(a, b, SCAN_POINTS)
        elif kind == "log_left":
            grid = np.sort(a - b * np.logspace(-9, 6, SCAN_POINTS))
        else:
            grid = b * np.logspace(-9, 6, SCAN_POINTS)
        rows = []
        for alpha in grid:
            try:
                rows.append([ef.root(alpha, lo, hi) for lo, hi in ef.slots(alpha)])
            except SingularKernelError:
                rows.append(None)
        for i in range(len(grid) - 1):
            r0, r1 = rows[i], rows[i + 1]
            if r0 is None or r1 is None or len(r0) != len(r1):
                continue
            for k in range(len(r0)):
                h0 = ef.d_alpha(r0[k], grid[i])
                h1 = ef.d_alpha(r1[k], grid[i + 1])
                if h0 == 0 or h0 * h1 < 0:

                    def slot_of(al, k=k):
                        lo, hi = ef.slots(al)[k]
                        return ef.root(al, lo, hi)

                    try:
                        x, _ = _refine_critical(ef, grid[i], grid[i + 1], slot_of)
                    except (ValueError, IndexError, SingularKernelError) as exc:
                        flags.append(f"unrefined critical point near alpha={grid[i]:.6g}: {exc}")
                        continue
                    if x > 0:
                        values.append(float(x))
    return values, flags


def _support_from_candidates(model: SpectralModel, lam: float):
    values, flags = _critical_values(model)
    cands = sorted(v for v in values if 0 < v < lam * (1 - 1e-12))
    pts = [0.0] + cands + [lam]
    merged = [pts[0]]
    for p in pts[1:]:
        if p - merged[-1] > 1e-9 * max(lam, 1.0):
            merged.append(p)
    merged[-1] = lam
    mids = np.array([0.5 * (a + b) for a, b in zip(merged[:-1], merged[1:])])
    eta = 1e-9 * max(lam, 1.0)
    sol = solve_many(model, mids + 1j * eta)
    if not sol.converged.all():
        flags.append("density check failed at some support candidates; partial result")
    dens = np.where(sol.converged, sol.mc.imag / math.pi, np.nan)
    inside = dens > 1e-6
    support: list[tuple[float, float]] = []
    for (a, b), flag in zip(zip(merged[:-1], merged[1:]), inside):
        if not flag:
            continue
        if support and support[-1][1] == a:
            support[-1] = (support[-1][0], b)
        else:
            support.append((a, b))
    if not support or support[-1][1] != lam:
        flags.append("rightmost interval not confirmed by density check")
    return support, flags


def find_support(model: SpectralModel) -> list[tuple[float, float]]:
    """Support of rho_c on (0, inf) as sorted disjoint intervals."""
    _, lam, _, _ = _rightmost_critical(model)
    support, _ = _support_from_candidates(model, lam)
    return support


@dataclass
class _MassProfile:
    """Cumulative mass from the right, per support interval, on a cosine grid."""

    intervals: list[tuple[float, float]]
    thetas: list[np.ndarray]
    cums: list[np.ndarray]  # mass of [E(theta), b] within the interval
    totals: list[float]

    def __post_init__(self):
        self.interps = [PchipInterpolator(th, cum) for th, cum in zip(self.thetas, self.cums)]

    def total(self) -> float:
        return float(sum(self.totals))

    def mass_right_of(self, e: float) -> float:
        acc = 0.0
        for (a, b), interp, tot in zip(self.intervals, self.interps, self.totals):
            if e >= b:
                continue
            if e <= a:
                acc += tot
                continue
            theta = math.acos(1.0 - 2.0 * (e - a) / (b - a))
            acc += float(interp(theta))
        return acc

    def quantile_from_right(self, q: float) -> float:
        """Largest x with mass of [x, inf) equal to q."""
        acc = 0.0
        for k in range(len(self.intervals) - 1, -1, -1):
            (a, b), th, cum, tot = self.intervals[k], self.thetas[k], self.cums[k], self.totals[k]
            if q <= acc + tot:
                target = q - acc
                if target <= 0:
                    return b
                if target >= tot:
                    return a
                # cum decreases in theta; bracket the target inside one grid cell
                i = int(np.searchsorted(-cum, -target, side="left"))
                i = min(max(i, 1), th.size - 1)
                interp = self.interps[k]
                theta = brentq(lambda t: float(interp(t)) - target, th[i - 1], th[i], xtol=1e-15)
                return a + (b - a) * (1.0 - math.cos(theta)) / 2.0
            acc += tot
        raise QuantileExhaustedError(f"quantile {q} exceeds the total mass {acc}")


def _mass_profile(model: SpectralModel, support, which: str, cfg: SolverConfig | None, tol=1e-8) -> _MassProfile:
    thetas, cums, totals = [], [], []
    for a, b in support:
        eta = 1e-12 * max(b, 1.0)
        level = 8
        prev = None
        while True:
            m = 2**level + 1
            th = np.linspace(0.0, math.pi, m)
            e = a + (b - a) * (1.0 - np.cos(th)) / 2.0
            inner = slice(1, -1)
            sol = solve_many(model, e[inner] + 1j * eta, cfg)
            im = {"c": sol.mc, "2c": sol.m2c, "1c": sol.m1c}[which].imag
            rho = np.zeros(m)
            rho[inner] = np.clip(np.nan_to_num(im / math.pi), 0.0, None)
            integrand = rho * (b - a) / 2.0 * np.sin(th)
            # the integrand is even in theta about both ends; a hard edge leaves it nonzero there
            integrand[0] = max((4.0 * integrand[1] - integrand[2]) / 3.0, 0.0)
            integrand[-1] = max((4.0 * integrand[-2] - integrand[-3]) / 3.0, 0.0)
            # accumulate from theta = pi (the right end b) down to theta
            rev = cumulative_simpson(integrand[::-1], dx=th[1] - th[0], initial=0.0)
            cum = np.maximum.accumulate(rev)[::-1]
            total = float(cum[0])
            if prev is not None and abs(total - prev) <= tol or level >= 14:
                break
            prev = total
            level += 1
        thetas.append(th)
        cums.append(cum)
        totals.append(total)
    return _MassProfile(list(support), thetas, cums, totals)


@dataclass
class ClassicalLocations:
    gammas: np.ndarray
    j_max: int


def classical_locations(
    model: SpectralModel, edge: EdgeReport, j_max: int, cfg: SolverConfig | None = None
) -> ClassicalLocations:
    """Quantiles gamma_j of rho_c: mass (j-1)/n lies to the right of gamma_j."""
    if not 1 <= j_max <= model.n:
        raise ValueError(f"j_max must lie in [1, n={model.n}]")
    support = edge.support or find_support(model)
    prof = _mass_profile(model, support, "c", cfg)
    gam = np.empty(j_max)
    gam[0] = edge.lambda_plus
    for j in range(2, j_max + 1):
        gam[j - 1] = prof.quantile_from_right((j - 1) / model.n)
    gam = np.minimum.accumulate(gam)
    return ClassicalLocations(gam, j_max)


def counting_function(model: SpectralModel, e: float, cfg: SolverConfig | None = None, edge: EdgeReport | None = None) -> float:
    """n_c(E): mass of rho_2c on [E, inf)."""
    edge = edge or find_rightmost_edge(model)
    if e >= edge.lambda_plus:
        return 0.0
    prof = _mass_profile(model, edge.support or find_support(model), "2c", cfg)
    return prof.mass_right_of(e)
