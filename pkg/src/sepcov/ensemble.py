"""Seeded sampling of separable covariance ensembles and rescaled edge statistics.

Seeding: replica ``i`` of a batch with master seed ``S`` draws from
``numpy.random.SeedSequence(S, spawn_key=(0, i))``; the per-batch rotation
pair (U, V) draws from ``SeedSequence(S, spawn_key=(1,))``. The recorded
64-bit replica seed is the first word of ``generate_state`` for that sequence.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special, stats

from .edge import EdgeReport
from .errors import BatchError, ModelError
from .model import SpectralModel

KINDS = ("gaussian", "symmetric_bernoulli", "heavy_tail", "truncated")
BATCH_SUCCESS = 0.99


def _heavy_tail_raw(s, c: float, p: float):
    """P(|q| > s) before variance normalization."""
    s = np.asarray(s, float)
    with np.errstate(divide="ignore", over="ignore"):
        val = c / (s**4 * np.log(math.e + s) ** p)
    return np.minimum(1.0, val)


def _heavy_tail_inverse(u, c: float, p: float):
    """Solve tail(s) = u for s (u in (0, 1]) by Newton on log s."""
    u = np.asarray(u, float)
    x = (math.log(c) - np.log(u)) / 4.0
    for _ in range(50):
        es = np.exp(x)
        lg = np.log(math.e + es)
        h = math.log(c) - 4.0 * x - p * np.log(lg) - np.log(u)
        dh = -4.0 - p * es / ((math.e + es) * lg)
        step = h / dh
        x = x - step
        if np.all(np.abs(step) < 1e-14 * np.maximum(1.0, np.abs(x))):
            break
    return np.exp(x)


def _heavy_floor(c: float, p: float) -> float:
    # smallest s with c / (s^4 log(e+s)^p) <= 1, i.e. where the tail leaves 1
    return float(_heavy_tail_inverse(1.0, c, p))


@dataclass
class EntryLaw:
    """Symmetric, mean-zero, unit-variance law for the entries q of sqrt(N)·X."""

    kind: str
    params: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)

    @property
    def law_id(self) -> str:
        if self.kind == "truncated":
            base = self.params["base"]["kind"]
            return f"truncated[{base},eps={self.params['epsilon']},N={self.params['big_n']}]"
        if self.kind == "heavy_tail":
            return f"heavy_tail[c={self.params['c']},p={self.params['log_power']}]"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "moments": self.moments}

    def tail(self, s):
        """P(|q| > s) for the normalized law (closed form where available)."""
        s = np.asarray(s, float)
        if self.kind == "gaussian":
            return special.erfc(s / math.sqrt(2.0))
        if self.kind == "symmetric_bernoulli":
            return (s < 1.0).astype(float)
        if self.kind == "heavy_tail":
            return _heavy_tail_raw(s * self.params["scale"], self.params["c"], self.params["log_power"])
        raise ModelError(f"no closed-form tail for {self.kind}")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal(size)
        if self.kind == "symmetric_bernoulli":
            return rng.integers(0, 2, size=size) * 2.0 - 1.0
        if self.kind == "heavy_tail":
            return _sample_heavy(rng, size, self.params["c"], self.params["log_power"], 0.0) / self.params["scale"]
        if self.kind == "truncated":
            return _sample_truncated(self, rng, size)
        raise ModelError(f"unknown law kind {self.kind!r}")


def _sample_heavy(rng, size, c, p, u_min):
    u = rng.uniform(u_min, 1.0, size=size)
    u = np.where(u <= 0.0, np.nextafter(0.0, 1.0), u)
    mag = _heavy_tail_inverse(u, c, p)
    sign = rng.integers(0, 2, size=size) * 2.0 - 1.0
    return sign * mag


def _sample_truncated(law: EntryLaw, rng, size) -> np.ndarray:
    prm = law.params
    base = make_entry_law(prm["base"]["kind"], prm["base"]["params"])
    cut = prm["cutoff"]
    if prm["alpha_n"] == 0.0:
        raw = base.sample(rng, size)
    elif base.kind == "gaussian":
        raw = stats.truncnorm.rvs(-cut, cut, size=size, random_state=rng)
    elif base.kind == "heavy_tail":
        bp = base.params
        u_min = float(_heavy_tail_raw(cut * bp["scale"], bp["c"], bp["log_power"]))
        raw = _sample_heavy(rng, size, bp["c"], bp["log_power"], u_min) / bp["scale"]
    else:
        raise ModelError(f"cannot truncate {base.kind}")
    return (raw + prm["shift"]) / prm["norm"]


def _heavy_moments(c: float, p: float) -> tuple[float, float]:
    """Raw E q^2 and E q^4 of the unnormalized heavy-tail law."""
    s0 = _heavy_floor(c, p)
    # E|q|^k = s0^k + int_{s0}^inf k s^{k-1} c / (s^4 log(e+s)^p) ds
    second = s0**2 + integrate.quad(lambda s: 2.0 * c / (s**3 * math.log(math.e + s) ** p), s0, np.inf, limit=200)[0]
    # in u = log s the fourth-moment integrand is 4c / log(e + e^u)^p
    fourth = s0**4 + integrate.quad(lambda u: 4.0 * c / np.logaddexp(1.0, u) ** p, math.log(s0), np.inf, limit=400)[0]
    return second, fourth


def make_entry_law(kind: str, params: dict | None = None) -> EntryLaw:
    """Build a normalized entry law and record its moments."""
    params = dict(params or {})
    if kind == "heavy":
        kind = "heavy_tail"
    if kind == "gaussian":
        return EntryLaw(kind, {}, {"mean": 0.0, "variance": 1.0, "third": 0.0, "fourth": 3.0, "fourth_finite": True})
    if kind == "symmetric_bernoulli":
        return EntryLaw(kind, {}, {"mean": 0.0, "variance": 1.0, "third": 0.0, "fourth": 1.0, "fourth_finite": True})
    if kind == "heavy_tail":
        c = float(params.get("c", 1.0))
        p = float(params.get("log_power", 2.0))
        if not (c > 0 and math.isfinite(c)) or p < 0:
            raise ModelError(f"heavy_tail needs c > 0 and log_power >= 0, got c={c}, log_power={p}")
        second, fourth = _heavy_moments(c, p)
        if not math.isfinite(second) or second <= 0:
            raise ModelError("heavy_tail parameters give no finite variance")
        scale = math.sqrt(second)
        fourth_finite = p > 1.0
        moments = {
            "mean": 0.0,
            "variance": 1.0,
            "third": 0.0,
            "fourth": fourth / second**2 if fourth_finite else math.inf,
            "fourth_finite": fourth_finite,
        }
        return EntryLaw(kind, {"c": c, "log_power": p, "scale": scale}, moments)
    if kind == "truncated":
        base = params.get("base", {"kind": "gaussian"})
        if isinstance(base, str):
            base = {"kind": base}
        law, _, _ = truncate_law(make_entry_law(base["kind"], base.get("params")), params["epsilon"], params["big_n"])
        return law
    raise ModelError(f"unknown entry law {kind!r}; expected one of {', '.join(KINDS)}")


def entry_law_from_dict(doc: dict) -> EntryLaw:
    params = doc.get("params", {})
    if doc["kind"] == "truncated":
        return make_entry_law("truncated", params)
    return make_entry_law(doc["kind"], params)


def truncate_law(base: EntryLaw, epsilon: float, big_n: int) -> tuple[EntryLaw, float, float]:
    """Condition ``base`` on |q| <= N^{1/2 - epsilon}, recentre, renormalize."""
    if not 0 < epsilon < 0.5:
        raise ModelError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    if base.kind == "truncated":
        raise ModelError("base law is already truncated")
    cut = float(big_n) ** (0.5 - epsilon)
    alpha_n = float(base.tail(cut))
    beta_n = 0.0  # E[1(|q|>cut) q] vanishes for every symmetric built-in
    shift = beta_n / (1.0 - alpha_n)
    if alpha_n == 0.0:
        second = 1.0
    elif base.kind == "gaussian":
        second = float(stats.truncnorm.var(-cut, cut))
    elif base.kind == "heavy_tail":
        bp = base.params
        raw_cut = cut * bp["scale"]
        t_cut = float(_heavy_tail_raw(raw_cut, bp["c"], bp["log_power"]))
        s0 = _heavy_floor(bp["c"], bp["log_power"])
        # E[q^2; |q| <= cut] = int_0^cut 2s (tail(s) - tail(cut)) ds
        lo = min(s0, raw_cut)
        part = lo**2 * (1.0 - t_cut)
        if raw_cut > s0:
            part += integrate.quad(
                lambda s: 2.0 * s * (float(_heavy_tail_raw(s, bp["c"], bp["log_power"])) - t_cut), s0, raw_cut, limit=200
            )[0]
        second = part / (1.0 - alpha_n) / bp["scale"] ** 2
    else:
        raise ModelError(f"cannot truncate {base.kind}")
    second_shifted = second + shift**2
    params = {
        "base": base.to_dict(),
        "epsilon": float(epsilon),
        "big_n": int(big_n),
        "cutoff": cut,
        "alpha_n": alpha_n,
        "beta_n": beta_n,
        "shift": shift,
        "second_moment": second_shifted,
        "norm": math.sqrt(second_shifted),
    }
    moments = {"mean": 0.0, "variance": 1.0, "third": 0.0, "fourth_finite": True}
    return EntryLaw("truncated", params, moments), alpha_n, beta_n


def haar_orthogonal(dim: int, seed=None) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign-corrected R diagonal)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass
class SampleSpectrum:
    eigenvalues: np.ndarray  # descending, length min(n, N)
    seed: int
    law_id: str
    rotated: bool
    n: int
    big_n: int
    xi: np.ndarray | None = None  # n x n left singular vectors
    zeta: np.ndarray | None = None  # N x N right singular vectors
    sigma_a: np.ndarray | None = None
    sigma_b: np.ndarray | None = None


def replica_sequence(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(0, int(index)))


def rotation_sequence(master_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(1,))


def seed64(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def _data_factor(model: SpectralModel, law: EntryLaw, rng, rotations):
    n, big_n = model.n, model.big_n
    x = law.sample(rng, (n, big_n)) / math.sqrt(big_n)
    sa = np.sqrt(model.diag_a())
    sb = np.sqrt(model.diag_b())
    if rotations is not None:
        u, v = rotations
        x = u.T @ x @ v
    return sa[:, None] * x * sb[None, :], sa, sb


def sample_factor(model: SpectralModel, law: EntryLaw, seed, rotated: bool = False, rotations=None) -> np.ndarray:
    """The n x N factor M whose squared singular values ``sample_spectrum`` returns for the same seed."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    rng = np.random.default_rng(seq)
    if rotated and rotations is None:
        rotations = (haar_orthogonal(model.n, rng), haar_orthogonal(model.big_n, rng))
    return _data_factor(model, law, rng, rotations if rotated else None)[0]


def sample_spectrum(
    model: SpectralModel,
    law: EntryLaw,
    seed,
    rotated: bool = False,
    keep_vectors: bool = False,
    rotations: tuple[np.ndarray, np.ndarray] | None = None,
) -> SampleSpectrum:
    """Eigenvalues of Sigma^{1/2} U* X B X* U Sigma^{1/2} via the SVD of its n x N factor.

    ``seed`` is an int or a SeedSequence. When ``rotated`` is set and no
    ``rotations`` are given, U and V are drawn from the same stream before X.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    rng = np.random.default_rng(seq)
    if rotated and rotations is None:
        rotations = (haar_orthogonal(model.n, rng), haar_orthogonal(model.big_n, rng))
    m, sa, sb = _data_factor(model, law, rng, rotations if rotated else None)
    try:
        if keep_vectors:
            left, s, right_t = np.linalg.svd(m, full_matrices=True)
        else:
            s = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD failed for seed {seed64(seq)}: {exc}") from exc
    spec = SampleSpectrum(np.sort(s**2)[::-1], seed64(seq), law.law_id, bool(rotated), model.n, model.big_n)
    if keep_vectors:
        spec.xi, spec.zeta = left, right_t.T
        spec.sigma_a, spec.sigma_b = sa**2, sb**2
    return spec


def rescale_stat(lambda1, edge: EdgeReport, big_n: int):
    """gamma0 N^{2/3} (lambda1 - lambda_+)."""
    return edge.gamma0 * big_n ** (2.0 / 3.0) * (np.asarray(lambda1, float) - edge.lambda_plus)


@dataclass
class EnsembleBatch:
    model_hash: str
    law: EntryLaw
    reps: int
    master_seed: int
    rotated: bool
    fresh_rotations: bool
    seeds: np.ndarray
    lambda1s: np.ndarray
    rescaled: np.ndarray
    top: np.ndarray  # reps x k largest eigenvalues
    lambda_plus: float
    gamma0: float
    big_n: int
    failed: list[int] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "model_hash": self.model_hash,
            "law": self.law.to_dict(),
            "reps": self.reps,
            "master_seed": self.master_seed,
            "rotated": self.rotated,
            "fresh_rotations": self.fresh_rotations,
            "lambda_plus": self.lambda_plus,
            "gamma0": self.gamma0,
            "N": self.big_n,
            "failed": self.failed,
            "seeding": "SeedSequence(master, spawn_key=(0, i)); rotations SeedSequence(master, spawn_key=(1,))",
        }

    def to_csv(self, path: str | Path) -> list[Path]:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "seed", "lambda1", "rescaled"])
            for i in range(self.reps):
                w.writerow([i, int(self.seeds[i]), repr(float(self.lambda1s[i])), repr(float(self.rescaled[i]))])
        meta = path.with_suffix(".meta.json")
        meta.write_text(json.dumps(self.metadata(), indent=2) + "\n")
        return [path, meta]


def run_batch(
    model: SpectralModel,
    law: EntryLaw,
    reps: int,
    master_seed: int,
    rotated: bool = False,
    edge: EdgeReport | None = None,
    threads: int = 1,
    fresh_rotations: bool = False,
    keep_top: int = 3,
) -> EnsembleBatch:
    """Sample ``reps`` replicas; replica i depends only on (master_seed, i)."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if edge is None:
        from .edge import find_rightmost_edge

        edge = find_rightmost_edge(model, with_support=False)
    rotations = None
    if rotated and not fresh_rotations:
        rrng = np.random.default_rng(rotation_sequence(master_seed))
        rotations = (haar_orthogonal(model.n, rrng), haar_orthogonal(model.big_n, rrng))
    k = min(keep_top, model.n)
    top = np.full((reps, k), np.nan)
    seeds = np.zeros(reps, dtype=np.uint64)
    failed: list[int] = []

    def one(i):
        seq = replica_sequence(master_seed, i)
        seeds[i] = seed64(seq)
        try:
            spec = sample_spectrum(model, law, seq, rotated, rotations=rotations)
        except np.linalg.LinAlgError:
            failed.append(i)
            return
        top[i] = spec.eigenvalues[:k]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(reps)))
    else:
        for i in range(reps):
            one(i)
    failed.sort()
    if reps - len(failed) < BATCH_SUCCESS * reps:
        raise BatchError(f"{len(failed)} of {reps} replicas failed", failed=failed)
    lam1 = top[:, 0].copy()
    return EnsembleBatch(
        model_hash=model.model_hash(),
        law=law,
        reps=reps,
        master_seed=int(master_seed),
        rotated=bool(rotated),
        fresh_rotations=bool(fresh_rotations),
        seeds=seeds,
        lambda1s=lam1,
        rescaled=rescale_stat(lam1, edge, model.big_n),
        top=top,
        lambda_plus=edge.lambda_plus,
        gamma0=edge.gamma0,
        big_n=model.big_n,
        failed=failed,
    )
