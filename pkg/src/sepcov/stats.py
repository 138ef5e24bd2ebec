"""Kolmogorov-Smirnov tests, universality comparison and the largest-eigenvalue detection test."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import kolmogorov

from .edge import find_rightmost_edge
from .ensemble import EnsembleBatch, make_entry_law, run_batch
from .errors import ModelError
from .model import SpectralModel, null_model
from .tw1 import tw1_cdf, tw1_moments


@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    n_a: int
    n_b: int | None
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def _kolmogorov_p(d: float, en: float) -> float:
    # asymptotic series with the small-sample correction (en + 0.12 + 0.11/en)
    lam = (en + 0.12 + 0.11 / en) * d
    return float(min(1.0, max(0.0, kolmogorov(lam))))


def _clean(x, name: str) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise ValueError(f"sample {name} is empty")
    return x


def ks_two_sample(a, b) -> TestResult:
    """Sup distance between the two ECDFs with the asymptotic Kolmogorov p-value."""
    a = np.sort(_clean(a, "a"))
    b = np.sort(_clean(b, "b"))
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return TestResult(d, _kolmogorov_p(d, en), a.size, b.size, "ks_two_sample")


def ks_one_sample(x, cdf=tw1_cdf) -> TestResult:
    x = np.sort(_clean(x, "x"))
    f = np.asarray(cdf(x), float)
    i = np.arange(1, x.size + 1)
    d = float(max(np.max(i / x.size - f), np.max(f - (i - 1) / x.size)))
    return TestResult(d, _kolmogorov_p(d, math.sqrt(x.size)), x.size, None, "ks_one_sample")


def universality_report(batch_g: EnsembleBatch, batch_x: EnsembleBatch) -> tuple[TestResult, dict]:
    """Two-sample KS on the rescaled largest eigenvalues of two batches of one model."""
    if batch_g.model_hash != batch_x.model_hash:
        raise ModelError(f"batches come from different models ({batch_g.model_hash} vs {batch_x.model_hash})")
    res = ks_two_sample(batch_g.rescaled, batch_x.rescaled)
    tw_mean, tw_sd = tw1_moments()

    def summ(b):
        r = b.rescaled[np.isfinite(b.rescaled)]
        return {"law": b.law.law_id, "reps": int(r.size), "mean": float(r.mean()), "sd": float(r.std(ddof=1))}

    summary = {"a": summ(batch_g), "b": summ(batch_x), "tw1_mean": tw_mean, "tw1_sd": tw_sd, "model_hash": batch_g.model_hash}
    return res, summary


@dataclass
class NullCovariance:
    """Known null covariances A~ (n x n) and B~ (N x N), symmetric positive definite."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def from_model(cls, model: SpectralModel) -> "NullCovariance":
        # diagonal frames; for a swapped model undo the exchange so shapes follow the data
        if model.swapped:
            scale = model.n / model.big_n
            return cls(np.diag(model.diag_b() * scale), np.diag(model.diag_a()))
        return cls(np.diag(model.diag_a()), np.diag(model.diag_b()))


def _inv_sqrt(mat: np.ndarray, name: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() <= 0:
        raise ModelError(f"null covariance {name} is singular (smallest eigenvalue {vals.min():.3g})")
    return (vecs / np.sqrt(vals)) @ vecs.T


@dataclass
class DetectionReport:
    statistic: float
    lambda1: float
    lambda_plus: float
    gamma0: float
    p_value_mc: float | None
    p_value_tw: float
    reps: int
    level: float
    reject: bool
    approximate: bool
    exceed: int | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mc_p_value(stat: float, null_stats) -> tuple[float, int]:
    null_stats = np.asarray(null_stats, float)
    k = int(np.sum(null_stats >= stat))
    return (1.0 + k) / (null_stats.size + 1.0), k


def detect_signal(
    data: np.ndarray,
    null: NullCovariance | SpectralModel,
    reps: int,
    seed: int,
    level: float = 0.05,
    threads: int = 1,
) -> DetectionReport:
    """Largest-eigenvalue test of H0 (no signal) for data Y = A~^{1/2} X B~^{1/2}.

    ``data`` is on the scale of X (entries of variance 1/N under the null).
    """
    data = np.asarray(data, float)
    if data.ndim != 2:
        raise ModelError("data must be a 2-D matrix")
    if isinstance(null, SpectralModel):
        null = NullCovariance.from_model(null)
    n, big_n = data.shape
    if null.a.shape != (n, n) or null.b.shape != (big_n, big_n):
        raise ModelError(f"data is {n}x{big_n} but the null covariances are {null.a.shape} and {null.b.shape}")
    white = _inv_sqrt(null.a, "A") @ data @ _inv_sqrt(null.b, "B")
    lam1 = float(np.linalg.svd(white, compute_uv=False)[0] ** 2)
    ident = null_model(n, big_n)
    edge = find_rightmost_edge(ident, with_support=False)
    stat = float(edge.gamma0 * ident.big_n ** (2.0 / 3.0) * (lam1 - edge.lambda_plus))
    p_tw = float(1.0 - tw1_cdf(stat))
    report = DetectionReport(stat, lam1, edge.lambda_plus, edge.gamma0, None, p_tw, int(reps), level, False, reps == 0)
    if reps > 0:
        batch = run_batch(ident, make_entry_law("gaussian"), reps, seed, edge=edge, threads=threads)
        report.p_value_mc, report.exceed = mc_p_value(stat, batch.rescaled[np.isfinite(batch.rescaled)])
        report.reject = report.p_value_mc <= level
    else:
        report.reject = p_tw <= level
        report.notes.append("no Monte Carlo calibration; decision uses the TW1 approximation")
    return report
