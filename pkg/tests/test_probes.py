import json
import math

import numpy as np
import pytest

from sepcov.dyson import ComplexPoint, DysonSolution, solve_at
from sepcov.edge import classical_locations, find_rightmost_edge
from sepcov.ensemble import SampleSpectrum, make_entry_law, replica_sequence, sample_factor, sample_spectrum
from sepcov.errors import PreconditionError, SingularPiError
from sepcov.model import build_model, null_model
from sepcov.probes import (
    anisotropic_probe,
    averaged_law_probe,
    control_psi,
    delocalization_probe,
    dense_resolvent,
    deterministic_limit_pi,
    empirical_stieltjes,
    pi_diagonal,
    rigidity_probe,
    spectral_resolvent,
)

GAUSS = make_entry_law("gaussian")
GOLDEN = (math.sqrt(5) - 1) / 2


def fake_solution(z, m2c, m1c=0j):
    return DysonSolution(ComplexPoint.of(z), m1c, m2c, 0j, 0, 0.0)


@pytest.mark.parametrize("z", [-1 + 1e-12j, 2 + 0.1j, 30 + 0.5j, 10 + 1e-3j])
def test_pi_identity(two_atom, z):
    sol = solve_at(two_atom, z)
    upper, _ = deterministic_limit_pi(two_atom, sol)
    assert np.dot(two_atom.pi_a.w, upper) / z == pytest.approx(sol.mc, abs=1e-12)


def test_pi_delta0_upper():
    m = build_model([(0, 1)], [(1, 0.5), (2, 0.5)], 50, 100)
    upper, lower = deterministic_limit_pi(m, solve_at(m, 1 + 1j))
    assert np.all(upper == -1)
    assert lower.size == 2


def test_pi_golden_ratio():
    m = null_model(100, 100)
    upper, lower = deterministic_limit_pi(m, solve_at(m, -1 + 1e-12j))
    assert upper[0].real == pytest.approx(-1 / (1 + GOLDEN), abs=1e-10)
    assert upper[0].real == pytest.approx(-GOLDEN, abs=1e-10)


def test_pi_singular():
    m = null_model(10, 10)
    with pytest.raises(SingularPiError):
        deterministic_limit_pi(m, fake_solution(1j, -1 + 0j, 0.5 + 0j))
    with pytest.raises(ZeroDivisionError):
        pi_diagonal(m, fake_solution(1j, 0.5 + 0j, -1 + 0j), np.ones(10), np.ones(10))


def test_psi_examples():
    assert control_psi(fake_solution(1 + 0.01j, 0j), 100) == pytest.approx(1.0)
    assert control_psi(fake_solution(1 + 0.01j, 1j), 100) == pytest.approx(2.0)
    big_n = 10_000
    m = null_model(big_n, big_n)
    psi = control_psi(solve_at(m, 2 + 1j / math.sqrt(big_n)), big_n)
    assert psi >= big_n**-0.5


def test_psi_monotone_in_eta(two_atom):
    etas = np.geomspace(1 / two_atom.big_n, 1, 25)
    for e in (5.0, 26.0, 30.0):
        psi = [control_psi(solve_at(two_atom, complex(e, eta)), two_atom.big_n) for eta in etas]
        assert np.all(np.diff(psi) < 0)


def test_empirical_stieltjes_examples():
    one = SampleSpectrum(np.array([1.0]), 0, "x", False, 1, 1)
    assert empirical_stieltjes(one, 1j) == pytest.approx(0.5 + 0.5j)
    zeros = SampleSpectrum(np.zeros(3), 0, "x", False, 5, 3)
    assert empirical_stieltjes(zeros, 1j) == pytest.approx(1j)


def test_empirical_stieltjes_lln(mp1):
    mc = solve_at(mp1, -1 + 1e-12j).mc
    assert mc.real == pytest.approx(GOLDEN, abs=1e-10)
    for i in range(20):
        spec = sample_spectrum(mp1, GAUSS, replica_sequence(6, i))
        assert abs(empirical_stieltjes(spec, -1 + 1e-12j) - mc) < 0.05


@pytest.mark.parametrize("n,big_n,rotated", [(12, 20, False), (20, 20, True), (7, 30, False)])
def test_spectral_resolvent_vs_dense_inverse(n, big_n, rotated):
    m = build_model([(0.5, 0.5), (2, 0.5)], [(1, 0.25), (3, 0.75)], n, big_n)
    f = sample_factor(m, GAUSS, 17, rotated=rotated)
    spec = sample_spectrum(m, GAUSS, 17, rotated=rotated, keep_vectors=True)
    for z in (1 + 0.5j, 3 + 1e-3j, -2 + 1j):
        dense = dense_resolvent(f, z)
        assert np.max(np.abs(spectral_resolvent(spec, z) - dense)) <= 1e-8
        # the averaged trace of the upper block gives the empirical m (upper block is z (MM^T - z)^-1)
        assert np.trace(dense[:n, :n]) / (n * z) == pytest.approx(empirical_stieltjes(spec, z), abs=1e-12)


def test_bilinear_vs_dense(two_atom_small):
    m = build_model([(1, 0.5), (4, 0.5)], [(1, 0.5), (4, 0.5)], 10, 20)
    f = sample_factor(m, GAUSS, 3)
    spec = sample_spectrum(m, GAUSS, 3, keep_vectors=True)
    from sepcov.probes import _bilinear

    rng = np.random.default_rng(0)
    u, v = rng.standard_normal((2, 30))
    z = 5 + 0.2j
    assert _bilinear(spec, z, u, v) == pytest.approx(u @ dense_resolvent(f, z) @ v, abs=1e-10)


def test_anisotropic_coordinate_vectors():
    m = null_model(30, 30)
    spec = sample_spectrum(m, GAUSS, 4, keep_vectors=True)
    from sepcov.probes import _bilinear

    z = 2 + 0.3j
    g = spectral_resolvent(spec, z)
    pi = pi_diagonal(m, solve_at(m, z), spec.sigma_a, spec.sigma_b)
    e3 = np.zeros(60)
    e3[3] = 1
    assert abs(_bilinear(spec, z, e3, e3) - pi[3]) == pytest.approx(abs(g[3, 3] - pi[3]), abs=1e-12)


def test_precondition_without_vectors(mp_half):
    spec = sample_spectrum(mp_half, GAUSS, 1)
    with pytest.raises(PreconditionError):
        anisotropic_probe(mp_half, spec, 3 + 0.1j, 2, 0)
    with pytest.raises(PreconditionError):
        delocalization_probe(spec, find_rightmost_edge(mp_half, with_support=False), 2, 0, 0.5)


def test_averaged_law_probe(mp1):
    spectra = [sample_spectrum(mp1, GAUSS, replica_sequence(10, i)) for i in range(100)]
    big_n = mp1.big_n
    zs = [4 + 1j, 4 + 1j * big_n ** (-2 / 3), 7 + 0.1j, 1 + 0.5j]
    rep = averaged_law_probe(mp1, spectra, zs, 4.0)
    assert len(rep.z) == 3 and len(rep.notes) == 1 and "outside" in rep.notes[0]
    assert rep.envelopes[1] == pytest.approx(big_n ** (-1 / 3))
    assert rep.errors.shape == (100, 3)
    assert np.all(np.isfinite(rep.ratios)) and np.all(rep.ratios >= 0)
    assert np.mean(rep.passed[:, 0]) >= 0.95
    assert np.mean(rep.passed[:, 1]) >= 0.95
    doc = json.loads(rep.to_json())
    assert doc["envelope_formula"] and len(rep.rows()) == 300


def test_delta1_matches_null_encoding():
    a = null_model(50, 100)
    b = build_model([(1, 0.6), (1, 0.4)], [(1, 1)], 50, 100)
    spectra_a = [sample_spectrum(a, GAUSS, i) for i in range(3)]
    spectra_b = [sample_spectrum(b, GAUSS, i) for i in range(3)]
    zs = [3 + 0.1j, 2.5 + 0.5j]
    ra = averaged_law_probe(a, spectra_a, zs, 2.9142135623730949)
    rb = averaged_law_probe(b, spectra_b, zs, 2.9142135623730949)
    assert np.array_equal(ra.errors, rb.errors)


def test_anisotropic_probe_mc():
    m = null_model(400, 400)
    z = 4 + 1j / math.sqrt(400)
    ok = 0
    for i in range(50):
        spec = sample_spectrum(m, GAUSS, replica_sequence(21, i), keep_vectors=True)
        rep = anisotropic_probe(m, spec, z, 20, seed=i)
        ok += bool(rep.passed[0])
    assert ok >= 45


def test_rigidity_probe():
    m = null_model(500, 500)
    edge = find_rightmost_edge(m)
    locs = classical_locations(m, edge, 500)
    exact = SampleSpectrum(locs.gammas.copy(), 0, "x", False, 500, 500)
    assert rigidity_probe(exact, locs, (1, 1)).errors[0] == 0.0
    spec = sample_spectrum(m, GAUSS, replica_sequence(40, 0))
    rep = rigidity_probe(spec, locs, (10, 250))
    q = json.loads(rep.notes[0])
    assert 10 <= q["argmax_j"] <= 250 and q["quantiles"][0] <= rep.errors[0]
    # negative control: shuffled eigenvalues are far from their classical locations
    shuffled = SampleSpectrum(np.random.default_rng(0).permutation(spec.eigenvalues), 0, "x", False, 500, 500)
    assert rigidity_probe(shuffled, locs, (10, 250)).errors[0] > 100
    with pytest.raises(PreconditionError):
        rigidity_probe(spec, locs, (0, 10))


def test_delocalization_probe():
    m = null_model(400, 400)
    edge = find_rightmost_edge(m, with_support=False)
    ok = 0
    for i in range(50):
        spec = sample_spectrum(m, GAUSS, replica_sequence(50, i), keep_vectors=True)
        rep = delocalization_probe(spec, edge, 20, seed=i, window_c1=0.5)
        ok += bool(rep.passed[0])
    assert ok >= 45


def test_delocalization_n1():
    spec = SampleSpectrum(np.array([2.0]), 0, "x", False, 1, 1, xi=np.array([[1.0]]), zeta=np.array([[-1.0]]))
    edge = find_rightmost_edge(null_model(1, 1), with_support=False)
    rep = delocalization_probe(spec, edge, 3, seed=0, window_c1=10.0)
    # unit vectors in dimension 1 are +-1, so both overlaps equal 1
    assert rep.errors[0] == pytest.approx(2.0)
