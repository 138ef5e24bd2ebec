import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepcov.errors import ModelError, SingularKernelError
from sepcov.model import (
    AtomicMeasure,
    build_model,
    kernel_integral,
    load_model,
    model_from_dict,
    null_model,
    save_model,
    validate_structure,
)


def test_two_atom_ratio():
    m = build_model([(1, 0.5), (4, 0.5)], [(1, 0.5), (4, 0.5)], 1000, 2000)
    assert m.d == 0.5
    assert m.sigma_1 == 4 and m.tilde_sigma_1 == 4
    assert not m.swapped


def test_null_model_is_square():
    m = null_model(300, 300)
    assert m.d == 1.0
    assert m.pi_a.atoms == [(1.0, 1.0)]


def test_duplicate_atoms_merge():
    mu = AtomicMeasure.from_atoms([(2, 0.3), (2, 0.7)])
    assert mu.atoms == [(2.0, 1.0)]


def test_sorted_descending_and_normalized():
    mu = AtomicMeasure.from_atoms([(1, 2), (4, 2), (3, 4)])
    assert mu.values == (4.0, 3.0, 1.0)
    assert mu.weights == pytest.approx((0.25, 0.5, 0.25))


def test_decimal_strings_match_floats():
    a = AtomicMeasure.from_atoms([("0.1", "0.5"), ("0.3", "0.5")])
    b = AtomicMeasure.from_atoms([(0.1, 0.5), (0.3, 0.5)])
    assert a == b


@pytest.mark.parametrize(
    "atoms",
    [[], [(-1, 1)], [(1, -0.5)], [(1, 0)], [(1, 2, 3)], [("abc", 1)]],
)
def test_bad_atoms_rejected(atoms):
    with pytest.raises(ModelError):
        AtomicMeasure.from_atoms(atoms)


@pytest.mark.parametrize("n,big_n", [(0, 10), (10, 0), (2.5, 10)])
def test_bad_dimensions(n, big_n):
    with pytest.raises(ModelError):
        build_model([(1, 1)], [(1, 1)], n, big_n)


def test_swap_when_n_exceeds_n():
    m = build_model([(2, 1)], [(3, 1)], 400, 200)
    assert m.swapped and m.n == 200 and m.big_n == 400 and m.d == 0.5
    # old B becomes the new A; old A picks up the n/N factor
    assert m.pi_a.atoms == [(3.0, 1.0)]
    assert m.pi_b.atoms == [(4.0, 1.0)]


def test_swap_preserves_nonzero_spectrum():
    from sepcov.edge import find_rightmost_edge

    wide = build_model([(1, 0.5), (4, 0.5)], [(2, 1)], 300, 600)
    tall = build_model([(2, 1)], [(1, 0.5), (4, 0.5)], 600, 300)
    # Q for the tall model is (N/n)-scaled relative to wide; its top eigenvalue scales by 600/300
    lw = find_rightmost_edge(wide, with_support=False).lambda_plus
    lt = find_rightmost_edge(tall, with_support=False).lambda_plus
    assert lt == pytest.approx(2.0 * lw, rel=1e-10)


def test_kernel_integral_examples():
    assert kernel_integral(AtomicMeasure.point(1), 0) == 1
    assert kernel_integral(AtomicMeasure.point(1), 1) == 0.5
    mu = AtomicMeasure.from_atoms([(1, 0.5), (4, 0.5)])
    assert kernel_integral(mu, -0.1) == pytest.approx(0.5 / 0.9 + 0.5 * 4 / 0.6, rel=1e-15)
    assert kernel_integral(mu, -0.1) == pytest.approx(3.8889, abs=1e-4)


def test_kernel_integral_pole():
    with pytest.raises(SingularKernelError) as info:
        kernel_integral(AtomicMeasure.from_atoms([(1, 0.5), (4, 0.5)]), -0.25)
    assert info.value.atom == 4.0


def test_kernel_integral_vectorized():
    mu = AtomicMeasure.from_atoms([(1, 0.5), (4, 0.5)])
    alphas = np.array([0.1, 1 + 1j, -0.05j])
    vec = kernel_integral(mu, alphas)
    assert np.allclose(vec, [kernel_integral(mu, a) for a in alphas], rtol=0, atol=1e-15)


values = st.floats(min_value=0.0, max_value=50.0, allow_nan=False)
weights = st.floats(min_value=1e-3, max_value=10.0)
alphas = st.complex_numbers(max_magnitude=5.0, allow_nan=False, allow_infinity=False).filter(lambda a: abs(a.imag) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(values, weights), min_size=1, max_size=6), alphas)
def test_kernel_conjugate_symmetry(atoms, alpha):
    mu = AtomicMeasure.from_atoms(atoms)
    assert kernel_integral(mu, alpha.conjugate()) == pytest.approx(np.conj(kernel_integral(mu, alpha)), rel=1e-12, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(values, weights), min_size=1, max_size=6), alphas, st.integers(min_value=0, max_value=5))
def test_kernel_linear_under_atom_split(atoms, alpha, k):
    mu = AtomicMeasure.from_atoms(atoms)
    k %= len(mu.atoms)
    v, w = mu.atoms[k]
    split = AtomicMeasure.from_atoms(
        [a for i, a in enumerate(mu.atoms) if i != k] + [(v, w / 3), (v, 2 * w / 3)]
    )
    assert kernel_integral(split, alpha) == pytest.approx(kernel_integral(mu, alpha), rel=1e-12, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(values, weights), min_size=1, max_size=6), st.integers(1, 50), st.integers(1, 50))
def test_rebuild_is_byte_identical(atoms, n, big_n):
    m = build_model(atoms, [(1, 1)], n, big_n)
    again = model_from_dict(json.loads(m.to_json()))
    assert again.to_json() == m.to_json()
    assert again.model_hash() == m.model_hash()


def test_save_load_roundtrip(tmp_path):
    m = build_model([(1, 0.5), (4, 0.5)], [("0.5", 1)], 10, 20)
    path = tmp_path / "m.json"
    save_model(m, path)
    assert load_model(path) == m


def test_load_missing_names_path(tmp_path):
    with pytest.raises(ModelError, match="missing.json"):
        load_model(tmp_path / "missing.json")


def test_load_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(p)
    p.write_text(json.dumps({"n": 3, "atoms_a": [[1, 1]]}))
    with pytest.raises(ModelError, match="missing field"):
        load_model(p)


def test_expand_counts():
    mu = AtomicMeasure.from_atoms([(1, 0.5), (4, 0.5)])
    diag = mu.expand(7)
    assert diag.size == 7 and set(diag) == {1.0, 4.0}
    assert np.sort(mu.expand(1000)).tolist() == [1.0] * 500 + [4.0] * 500


def test_validate_two_atom():
    m = build_model([(1, 0.5), (4, 0.5)], [(1, 0.5), (4, 0.5)], 1000, 2000)
    rep = validate_structure(m, 0.2)
    assert rep.passed
    assert rep.margins["norm_a"] == pytest.approx(1.0)


def test_validate_mass_at_zero_fails():
    m = build_model([(0, 0.9), (1, 0.1)], [(1, 1)], 100, 100)
    rep = validate_structure(m, 0.2)
    assert not rep.passed
    assert not rep.checks["mass_a_near_zero"]
    assert rep.checks["norm_a"]


def test_validate_null():
    assert validate_structure(null_model(10, 10), 0.5).passed


def test_validate_tau_range():
    with pytest.raises(ModelError):
        validate_structure(null_model(10, 10), 1.5)
