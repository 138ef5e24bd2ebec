"""Tracy-Widom (beta = 1) distribution table: generator and loader.

F1(s) = det(I - K_s) on L^2(0, inf), K_s(x, y) = Ai((x + y)/2 + s) / 2,
evaluated by Nystrom discretization on (0, L) with Gauss-Legendre nodes.
Run ``python -m sepcov.tw1 [path]`` to regenerate the shipped asset.
"""

from __future__ import annotations

import functools
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.special import airy

S_MIN, S_MAX, S_STEP = -10.0, 6.0, 0.01
LENGTH = 20.0
NODES = 200
ASSET = "tw1_table.csv"


def fredholm_f1(s: float, length: float = LENGTH, nodes: int = NODES) -> float:
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = (x + 1.0) * length / 2.0
    w = w * length / 2.0
    sw = np.sqrt(w)
    kern = 0.5 * airy((x[:, None] + x[None, :]) / 2.0 + s)[0]
    return float(np.linalg.det(np.eye(nodes) - sw[:, None] * kern * sw[None, :]))


def generate_table(length: float = LENGTH, nodes: int = NODES) -> tuple[np.ndarray, np.ndarray]:
    grid = np.round(np.arange(S_MIN, S_MAX + S_STEP / 2, S_STEP), 10)
    vals = np.array([fredholm_f1(s, length, nodes) for s in grid])
    vals = np.maximum.accumulate(np.clip(vals, 0.0, 1.0))
    return grid, vals


def write_table(path: str | Path) -> Path:
    grid, vals = generate_table()
    path = Path(path)
    header = (
        "# Tracy-Widom beta=1 CDF F1(s)\n"
        f"# det(I - K_s), K_s(x,y) = Ai((x+y)/2 + s)/2 on (0, {LENGTH:g}),"
        f" Nystrom with {NODES} Gauss-Legendre nodes\n"
        f"# s from {S_MIN:g} to {S_MAX:g} step {S_STEP:g}; values clipped to [0,1] and made non-decreasing\n"
        "# generator: python -m sepcov.tw1\n"
        "s,F1\n"
    )
    body = "".join(f"{s:.2f},{v:.17g}\n" for s, v in zip(grid, vals))
    path.write_text(header + body)
    return path


def read_table(path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    if path is None:
        text = resources.files("sepcov.data").joinpath(ASSET).read_text()
    else:
        text = Path(path).read_text()
    rows = [ln.split(",") for ln in text.splitlines() if ln and not ln.startswith("#") and not ln.startswith("s,")]
    data = np.array(rows, dtype=float)
    return data[:, 0], data[:, 1]


@functools.lru_cache(maxsize=1)
def _default():
    grid, vals = read_table()
    return grid, vals, PchipInterpolator(grid, vals)


def check_table(grid: np.ndarray, vals: np.ndarray) -> dict[str, bool]:
    return {
        "monotone": bool(np.all(np.diff(vals) >= 0)),
        "left_tail": bool(vals[0] < 1e-7),
        # 1 - F1(6) is about 1.9e-6 (right-tail asymptotic exp(-(2/3) s^1.5) / (4 sqrt(pi) s^0.75))
        "right_tail": bool(1e-6 < 1 - vals[-1] < 3e-6),
        "step": bool(np.allclose(np.diff(grid), S_STEP)),
    }


def tw1_cdf(s):
    """F1(s) by monotone cubic interpolation of the table; 0 / 1 outside it."""
    grid, _, interp = _default()
    s_arr = np.asarray(s, float)
    out = np.clip(interp(np.clip(s_arr, grid[0], grid[-1])), 0.0, 1.0)
    out = np.where(s_arr < grid[0], 0.0, np.where(s_arr > grid[-1], 1.0, out))
    return float(out) if np.ndim(s) == 0 else out


def tw1_moments() -> tuple[float, float]:
    """Mean and standard deviation implied by the table."""
    grid, vals, _ = _default()
    dens = np.gradient(vals, grid)
    mean = trapezoid(grid * dens, grid)
    second = trapezoid(grid**2 * dens, grid)
    return float(mean), float(np.sqrt(second - mean**2))


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data" / ASSET
    print(write_table(target))
