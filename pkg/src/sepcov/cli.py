"""Command-line front end: density, edge, simulate, verify, detect, selftest.

Exit codes: 0 success, 1 domain error (bad model, unreadable file, solver
failure), 2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import secrets
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import __version__
from .dyson import density_grid, solve_at, solve_many
from .edge import classical_locations, find_rightmost_edge
from .ensemble import make_entry_law, replica_sequence, run_batch, sample_factor, sample_spectrum, truncate_law
from .errors import SepCovError
from .model import build_model, load_model, null_model
from .probes import (
    anisotropic_probe,
    averaged_law_probe,
    deterministic_limit_pi,
    delocalization_probe,
    dense_resolvent,
    rigidity_probe,
    spectral_resolvent,
)
from .stats import detect_signal
from .tw1 import check_table, read_table


@dataclass
class RunManifest:
    command: str
    config: dict
    model_hash: str | None
    seed: int | None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _emit(args, model_hash, seed, outputs: list[Path]) -> Path:
    """One manifest per run, next to the primary output, listing every file written."""
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = RunManifest(args.command, config, model_hash, seed, outputs=[str(p) for p in outputs])
    return manifest.write(_manifest_for(outputs[0]))


def _resize(model, n, big_n):
    if n is None and big_n is None:
        return model
    n = n or model.n
    big_n = big_n or max(n, round(n / model.d))
    return build_model(model.pi_a.atoms, model.pi_b.atoms, n, big_n)


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(63)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _law(args, big_n):
    kind = {"heavy": "heavy_tail", "bernoulli": "symmetric_bernoulli"}.get(args.law, args.law)
    if kind == "truncated":
        base = {"heavy": "heavy_tail"}.get(args.base_law, args.base_law)
        return truncate_law(make_entry_law(base), args.epsilon, big_n)[0]
    return make_entry_law(kind)


def cmd_density(args) -> int:
    model = load_model(args.model)
    e_min = args.emin
    e_max = args.emax
    if e_max is None:
        e_max = 1.2 * find_rightmost_edge(model, with_support=False).lambda_plus
    curve = density_grid(model, e_min, e_max, args.eta, args.points)
    out = Path(args.out)
    curve.to_csv(out, model=model)
    _emit(args, model.model_hash(), None, [out])
    print(json.dumps({"output": str(out), "points": args.points, "failed": len(curve.failed)}))
    return 0


def cmd_edge(args) -> int:
    model = load_model(args.model)
    report = find_rightmost_edge(model, tau=args.tau)
    text = report.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        _emit(args, model.model_hash(), None, [out])
    return 0


def _histogram(values, bins: int, path: Path) -> None:
    vals = values[np.isfinite(values)]
    counts, edges = np.histogram(vals, bins=bins)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["left", "right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def cmd_simulate(args) -> int:
    model = _resize(load_model(args.model), args.n, args.N)
    seed = _seed(args)
    law = _law(args, model.big_n)
    edge = find_rightmost_edge(model, with_support=False)
    batch = run_batch(model, law, args.reps, seed, rotated=args.rotated, edge=edge,
                      threads=args.threads, fresh_rotations=args.fresh_rotations)
    out = Path(args.out)
    outputs = batch.to_csv(out)
    if args.hist_bins:
        hist = out.with_name(out.stem + ".hist.csv")
        _histogram(batch.rescaled, args.hist_bins, hist)
        outputs.append(hist)
    _emit(args, model.model_hash(), seed, outputs)
    r = batch.rescaled[np.isfinite(batch.rescaled)]
    print(json.dumps({"output": str(out), "reps": batch.reps, "failed": batch.failed,
                      "rescaled_mean": float(r.mean()), "rescaled_sd": float(r.std(ddof=1))}))
    return 0


def cmd_verify(args) -> int:
    model = _resize(load_model(args.model), args.n, args.N)
    seed = _seed(args)
    law = _law(args, model.big_n)
    edge = find_rightmost_edge(model)
    big_n = model.big_n
    keep = args.probe in ("anisotropic", "delocalization")
    rows, passes = [], []
    locs = None
    if args.probe in ("rigidity", "delocalization"):
        locs = classical_locations(model, edge, model.n)
    for i in range(args.reps):
        spec = sample_spectrum(model, law, replica_sequence(seed, i), keep_vectors=keep)
        if args.probe == "averaged":
            zs = [edge.lambda_plus + 1j * big_n ** (-2 / 3), edge.lambda_plus + 1j]
            rep = averaged_law_probe(model, [spec], zs, edge.lambda_plus, c=args.C, eps=args.eps)
        elif args.probe == "anisotropic":
            rep = anisotropic_probe(model, spec, edge.lambda_plus + 1j * big_n**-0.5, args.pairs, seed + i,
                                    c=args.C, eps=args.eps)
        elif args.probe == "rigidity":
            hi = args.j_max or model.n // 2
            rep = rigidity_probe(spec, locs, (args.j_min, hi), c=args.C)
        else:
            rep = delocalization_probe(spec, edge, args.pairs, seed + i, args.window, locations=locs, c=args.C)
        passes.append(bool(np.all(rep.passed)))
        for row in rep.rows():
            rows.append([i] + row[1:])
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "z_index", "E", "eta", "error", "envelope", "ratio", "pass"])
        w.writerows(rows)
    _emit(args, model.model_hash(), seed, [out])
    frac = float(np.mean(passes))
    print(json.dumps({"probe": args.probe, "reps": args.reps, "pass_fraction": frac,
                      "required": args.required, "passed": frac >= args.required, "output": str(out)}))
    return 0


def cmd_detect(args) -> int:
    null = load_model(args.null_model)
    path = Path(args.data)
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise SepCovError(f"cannot read data file {path}: {exc}") from exc
    except ValueError as exc:
        raise SepCovError(f"data file {path} is not a numeric CSV: {exc}") from exc
    seed = _seed(args)
    report = detect_signal(data, null, args.reps, seed, args.level, threads=args.threads)
    text = report.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        _emit(args, null.model_hash(), seed, [out])
    return 0


TWO_ATOM = [(1, 0.5), (4, 0.5)]


def selftest_checks(tw1_path: str | None = None) -> list[tuple[str, bool, str]]:
    """Closed-form oracle checks; returns (name, passed, detail) rows."""
    checks = []

    def add(name, ok, detail):
        checks.append((name, bool(ok), detail))

    golden = (math.sqrt(5) - 1) / 2
    sol = solve_at(null_model(100, 100), -1 + 1e-12j)
    add("golden_ratio", abs(sol.mc - golden) < 1e-10, f"m_c(-1) = {sol.mc.real:.15f}")

    for d in (0.25, 0.5, 1.0):
        lam = find_rightmost_edge(null_model(int(400 * d), 400), with_support=False).lambda_plus
        add(f"mp_edge_d={d}", abs(lam - (1 + math.sqrt(d)) ** 2) < 1e-8, f"lambda_+ = {lam:.12f}")

    two_atom = build_model(TWO_ATOM, TWO_ATOM, 200, 400)
    lam = find_rightmost_edge(two_atom, with_support=False).lambda_plus
    grid = np.linspace(-0.5, lam + 1.0, 6001)
    mass = trapezoid(solve_many(two_atom, grid + 1e-3j).mc.imag, grid) / math.pi
    add("density_normalization", 0.99 <= mass <= 1.01, f"mass = {mass:.6f}")

    sol = solve_at(two_atom, 2.0 + 0.1j)
    upper, _ = deterministic_limit_pi(two_atom, sol)
    lhs = complex(two_atom.pi_a.w @ upper) / sol.z.z
    add("pi_identity", abs(lhs - sol.mc) < 1e-12, f"|(1/nz) tr Pi - m_c| = {abs(lhs - sol.mc):.2e}")

    toy = build_model(TWO_ATOM, TWO_ATOM, 20, 40)
    law = make_entry_law("gaussian")
    spec = sample_spectrum(toy, law, 11, rotated=True, keep_vectors=True)
    gap = float(np.max(np.abs(spectral_resolvent(spec, 3 + 0.2j) - dense_resolvent(sample_factor(toy, law, 11, rotated=True), 3 + 0.2j))))
    add("dense_inverse_n20", gap < 1e-8, f"max |G_spec - G_dense| = {gap:.2e}")

    try:
        g, v = read_table(tw1_path)
        res = check_table(g, v)
        add("tw1_asset", all(res.values()), ", ".join(f"{k}={ok}" for k, ok in res.items()))
    except (OSError, ValueError) as exc:
        add("tw1_asset", False, f"unreadable table: {exc}")
    return checks


def cmd_selftest(args) -> int:
    checks = selftest_checks(args.tw1_table)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sepcov", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common_sim(sp):
        sp.add_argument("--model", required=True, help="model JSON file")
        sp.add_argument("--n", type=int, help="override n (N follows the model's ratio unless --N is given)")
        sp.add_argument("--N", type=int)
        sp.add_argument("--law", default="gaussian",
                        choices=["gaussian", "symmetric_bernoulli", "bernoulli", "heavy", "heavy_tail", "truncated"])
        sp.add_argument("--base-law", default="gaussian", choices=["gaussian", "heavy", "heavy_tail"])
        sp.add_argument("--epsilon", type=float, default=0.1, help="cutoff exponent for --law truncated")
        sp.add_argument("--reps", type=int, default=100)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("density", help="density curve by Stieltjes inversion")
    sp.add_argument("--model", required=True)
    sp.add_argument("--emin", type=float, default=0.0)
    sp.add_argument("--emax", type=float)
    sp.add_argument("--eta", type=float, default=1e-5)
    sp.add_argument("--points", type=int, default=400)
    sp.add_argument("--out", default="density.csv")
    sp.set_defaults(func=cmd_density)

    sp = sub.add_parser("edge", help="rightmost edge report (JSON on stdout)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_edge)

    sp = sub.add_parser("simulate", help="seeded batch of largest eigenvalues")
    common_sim(sp)
    sp.add_argument("--rotated", action="store_true")
    sp.add_argument("--fresh-rotations", action="store_true")
    sp.add_argument("--hist-bins", type=int, default=0)
    sp.add_argument("--out", default="batch.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="local-law / rigidity / delocalization probes")
    common_sim(sp)
    sp.add_argument("--probe", required=True, choices=["averaged", "anisotropic", "rigidity", "delocalization"])
    sp.add_argument("--C", type=float, default=10.0)
    sp.add_argument("--eps", type=float, default=0.1)
    sp.add_argument("--pairs", type=int, default=20)
    sp.add_argument("--j-min", type=int, default=10)
    sp.add_argument("--j-max", type=int)
    sp.add_argument("--window", type=float, default=0.5)
    sp.add_argument("--required", type=float, default=0.9)
    sp.add_argument("--out", default="verify.csv")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("detect", help="largest-eigenvalue signal detection test")
    sp.add_argument("--data", required=True, help="n x N numeric CSV, no header")
    sp.add_argument("--null-model", required=True)
    sp.add_argument("--reps", type=int, default=200)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--level", type=float, default=0.05)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("selftest", help="closed-form oracle checks")
    sp.add_argument("--tw1-table", help="check this table file instead of the shipped asset")
    sp.set_defaults(func=cmd_selftest)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SepCovError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
