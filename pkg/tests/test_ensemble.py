import json
import math

import numpy as np
import pytest
from scipy import special

from sepcov.edge import find_rightmost_edge
from sepcov.ensemble import (
    EnsembleBatch,
    entry_law_from_dict,
    haar_orthogonal,
    make_entry_law,
    replica_sequence,
    rescale_stat,
    run_batch,
    sample_factor,
    sample_spectrum,
    truncate_law,
)
from sepcov.errors import ModelError
from sepcov.model import build_model, null_model
from sepcov.stats import ks_two_sample

GAUSS = make_entry_law("gaussian")


def test_builtin_moments():
    assert [GAUSS.moments[k] for k in ("mean", "variance", "third", "fourth")] == [0, 1, 0, 3]
    b = make_entry_law("symmetric_bernoulli")
    assert b.moments["fourth"] == 1
    x = b.sample(np.random.default_rng(0), 10000)
    assert set(np.unique(x)) == {-1.0, 1.0}
    assert abs(x.mean()) < 4 / 100


def test_heavy_tail_law():
    law = make_entry_law("heavy_tail", {"c": 1.0})
    assert make_entry_law("heavy", {"c": 1.0}).law_id == law.law_id
    s = np.array([10.0, 20.0, 50.0, 100.0, 1000.0])
    s4p = s**4 * law.tail(s)
    assert s4p[2] < 0.3
    assert np.all(np.diff(s4p) < 0)
    x = law.sample(np.random.default_rng(7), 2_000_000)
    assert x.var() == pytest.approx(1.0, abs=0.02)
    assert abs(x.mean()) < 4 * x.std() / math.sqrt(x.size)
    # sampled tail frequencies against the constructed tail, within 5 binomial SE
    for t in (3.0, 5.0, 10.0):
        p = float(law.tail(t))
        se = math.sqrt(p * (1 - p) / x.size)
        assert np.mean(np.abs(x) > t) == pytest.approx(p, abs=5 * se)


def test_heavy_tail_rejects_bad_params():
    with pytest.raises(ModelError):
        make_entry_law("heavy_tail", {"c": -1.0})
    with pytest.raises(ModelError):
        make_entry_law("cauchy")


def test_law_roundtrip():
    for law in (GAUSS, make_entry_law("heavy_tail", {"c": 2.0}), truncate_law(GAUSS, 0.4, 10_000)[0]):
        doc = json.loads(json.dumps(law.to_dict()))
        again = entry_law_from_dict(doc)
        assert again.law_id == law.law_id
        a = law.sample(np.random.default_rng(3), 50)
        b = again.sample(np.random.default_rng(3), 50)
        assert np.array_equal(a, b)


def test_truncate_bernoulli_unchanged():
    law, a_n, b_n = truncate_law(make_entry_law("symmetric_bernoulli"), 0.2, 10_000)
    assert a_n == 0.0 and b_n == 0.0
    assert law.params["shift"] == 0.0 and law.params["norm"] == 1.0
    x = law.sample(np.random.default_rng(1), 1000)
    assert set(np.unique(x)) == {-1.0, 1.0}


def test_truncate_gaussian():
    eps, big_n = 0.4, 10_000
    law, a_n, b_n = truncate_law(GAUSS, eps, big_n)
    cut = big_n ** (0.5 - eps)
    assert cut == pytest.approx(10**0.4)
    assert a_n == pytest.approx(special.erfc(cut / math.sqrt(2)), rel=1e-12)
    assert b_n == 0.0 and law.params["shift"] == 0.0
    x = law.sample(np.random.default_rng(11), 1_000_000)
    assert np.max(np.abs(x)) <= cut / law.params["norm"] + 1e-12
    assert abs(x.mean()) < 3 * x.std() / math.sqrt(x.size)
    assert x.var() == pytest.approx(1.0, abs=5e-3)


def test_truncate_heavy_tail():
    base = make_entry_law("heavy_tail", {"c": 1.0})
    law, a_n, b_n = truncate_law(base, 0.25, 10_000)
    assert a_n == pytest.approx(float(base.tail(10.0)), rel=1e-12)
    x = law.sample(np.random.default_rng(5), 1_000_000)
    assert x.var() == pytest.approx(1.0, abs=0.01)
    assert abs(x.mean()) < 4 * x.std() / math.sqrt(x.size)


@pytest.mark.parametrize("eps", [0.0, 0.5, -0.1])
def test_truncate_epsilon_range(eps):
    with pytest.raises(ModelError):
        truncate_law(GAUSS, eps, 100)


def test_haar():
    assert abs(haar_orthogonal(1, 0)[0, 0]) == 1.0
    q = haar_orthogonal(50, 1)
    assert np.max(np.abs(q.T @ q - np.eye(50))) <= 1e-10
    rng = np.random.default_rng(2)
    diag = np.concatenate([np.diag(haar_orthogonal(200, rng)) for _ in range(500)])
    assert diag.var() == pytest.approx(1 / 200, rel=0.3)
    with pytest.raises(ValueError):
        haar_orthogonal(0)


def test_delta0_spectrum():
    m = build_model([(0, 1)], [(0, 1)], 20, 40)
    spec = sample_spectrum(m, GAUSS, 1)
    assert np.all(spec.eigenvalues == 0) and spec.eigenvalues.size == 20


def test_spectrum_shape_and_order(two_atom_small):
    spec = sample_spectrum(two_atom_small, GAUSS, 3, keep_vectors=True)
    ev = spec.eigenvalues
    assert ev.size == min(two_atom_small.n, two_atom_small.big_n)
    assert np.all(ev >= 0) and np.all(np.diff(ev) <= 0)
    assert spec.xi.shape == (200, 200) and spec.zeta.shape == (400, 400)


@pytest.mark.parametrize("rotated", [False, True])
def test_q1_q2_share_nonzero_spectrum(rotated):
    m = build_model([(1, 0.5), (4, 0.5)], [(1, 0.3), (2, 0.7)], 15, 25)
    f = sample_factor(m, GAUSS, 9, rotated=rotated)
    spec = sample_spectrum(m, GAUSS, 9, rotated=rotated)
    q1 = np.sort(np.linalg.eigvalsh(f @ f.T))[::-1]
    q2 = np.sort(np.linalg.eigvalsh(f.T @ f))[::-1]
    assert np.allclose(q1, q2[:15], atol=1e-12)
    assert np.allclose(q2[15:], 0, atol=1e-12)
    assert np.allclose(spec.eigenvalues, q1, atol=1e-12)


def test_swapped_model_same_spectrum():
    # an n > N model swaps sides; the nonzero eigenvalues must be those of the original product
    wide = build_model([(1, 0.5), (3, 0.5)], [(2, 1)], 30, 20)
    assert wide.swapped
    rng = np.random.default_rng(4)
    a = wide.diag_b() * 20 / 30  # original A, in the model's atom order
    q = rng.standard_normal((30, 20))
    x = q / math.sqrt(20)
    direct = np.linalg.eigvalsh(np.sqrt(a)[:, None] * x @ (2 * x.T) * np.sqrt(a)[None, :])
    top_direct = np.sort(direct)[::-1][:20]
    # same matrix seen from the swapped side: entries rescaled to variance 1/30
    xs = x.T * math.sqrt(20 / 30)
    m = np.sqrt(wide.diag_a())[:, None] * xs * np.sqrt(wide.diag_b())[None, :]
    assert np.allclose(np.sort(np.linalg.svd(m, compute_uv=False) ** 2)[::-1], top_direct, atol=1e-10)


def test_mp_null_mean_lambda1(mp1):
    batch = run_batch(mp1, GAUSS, 100, 2024)
    assert 3.85 <= batch.lambda1s.mean() <= 4.05


def test_lambda1_upper_bound(mp1):
    batch = run_batch(mp1, GAUSS, 500, 77, threads=4)
    bound = 4.0 + mp1.big_n ** (-2 / 3 + 0.2)
    assert np.mean(batch.lambda1s <= bound) >= 0.99


def test_rotation_invariance_gaussian():
    m = build_model([(1, 0.5), (4, 0.5)], [(1, 0.5), (4, 0.5)], 60, 120)
    plain = run_batch(m, GAUSS, 500, 31)
    rot = run_batch(m, GAUSS, 500, 32, rotated=True)
    assert ks_two_sample(plain.lambda1s, rot.lambda1s).p_value > 0.01


def test_batch_determinism(two_atom_small):
    edge = find_rightmost_edge(two_atom_small, with_support=False)
    a = run_batch(two_atom_small, GAUSS, 12, 99, edge=edge)
    b = run_batch(two_atom_small, GAUSS, 12, 99, edge=edge, threads=4)
    assert np.array_equal(a.lambda1s, b.lambda1s)
    assert np.array_equal(a.seeds, b.seeds)
    c = run_batch(two_atom_small, GAUSS, 12, 100, edge=edge)
    assert not np.array_equal(a.lambda1s, c.lambda1s)
    one = run_batch(two_atom_small, GAUSS, 1, 99, edge=edge)
    ref = sample_spectrum(two_atom_small, GAUSS, replica_sequence(99, 0))
    assert one.lambda1s[0] == ref.eigenvalues[0] == a.lambda1s[0]


def test_rotated_batch_determinism(two_atom_small):
    a = run_batch(two_atom_small, GAUSS, 4, 5, rotated=True, threads=2)
    b = run_batch(two_atom_small, GAUSS, 4, 5, rotated=True)
    assert np.array_equal(a.lambda1s, b.lambda1s)
    fresh = run_batch(two_atom_small, GAUSS, 4, 5, rotated=True, fresh_rotations=True)
    assert fresh.fresh_rotations and not np.array_equal(a.lambda1s, fresh.lambda1s)


def test_rescale_stat(two_atom_small):
    edge = find_rightmost_edge(two_atom_small, with_support=False)
    big_n = two_atom_small.big_n
    assert rescale_stat(edge.lambda_plus, edge, big_n) == 0.0
    assert rescale_stat(edge.lambda_plus + big_n ** (-2 / 3) / edge.gamma0, edge, big_n) == pytest.approx(1.0, rel=1e-9)
    batch = run_batch(two_atom_small, GAUSS, 5, 1, edge=edge)
    assert np.array_equal(batch.rescaled, rescale_stat(batch.lambda1s, edge, big_n))


@pytest.mark.slow
def test_two_atom_rescaled_mean(two_atom_small):
    batch = run_batch(two_atom_small, GAUSS, 2000, 2025, threads=4)
    assert -2.1 <= batch.rescaled.mean() <= -1.2


def test_batch_csv(tmp_path, two_atom_small):
    batch = run_batch(two_atom_small, GAUSS, 3, 8)
    csv_path, meta_path = batch.to_csv(tmp_path / "b.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "replica,seed,lambda1,rescaled" and len(lines) == 4
    row = lines[1].split(",")
    assert float(row[2]) == batch.lambda1s[0]
    meta = json.loads(meta_path.read_text())
    assert meta["model_hash"] == two_atom_small.model_hash() and meta["law"]["kind"] == "gaussian"
    assert isinstance(batch, EnsembleBatch)


def test_batch_rejects_zero_reps(mp_half):
    with pytest.raises(ValueError):
        run_batch(mp_half, GAUSS, 0, 1)


def test_truncated_batch_runs():
    law, _, _ = truncate_law(make_entry_law("heavy_tail", {"c": 1.0}), 0.1, 400)
    batch = run_batch(null_model(100, 200), law, 20, 3)
    assert np.all(np.isfinite(batch.rescaled))
