import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradpoison import attacks
from gradpoison.aggregators import AggregatorSpec, aggregate
from gradpoison.attacks import AttackSpec, AuxiliaryStats, DegenerateAttackWarning

AVG = AggregatorSpec("averaging")


def poisoned_mean(stats, gp, n_p):
    return (stats.n * stats.mean + n_p * gp) / (stats.n + n_p)


def test_ga_example():
    stats = AuxiliaryStats.from_grads([[1.0, 0.0], [1.0, 0.0]])
    gp = attacks.craft_ga(stats, 1.0, 1)
    assert gp.tolist() == [-5.0, 0.0]
    assert poisoned_mean(stats, gp, 1).tolist() == [-1.0, 0.0]


@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0.1, 5), n_a=st.integers(1, 20), n_p=st.integers(1, 20))
def test_ga_identity(seed, lam, n_a, n_p):
    rng = np.random.default_rng(seed)
    stats = AuxiliaryStats.from_grads(rng.standard_normal((n_a, 6)))
    gp = attacks.craft_ga(stats, lam, n_p)
    pm = poisoned_mean(stats, gp, n_p)
    assert np.allclose(pm, -lam * stats.mean, rtol=0, atol=1e-12 * (1 + lam) * np.abs(stats.mean).max() * (n_a + n_p))
    cos = pm @ stats.mean / (np.linalg.norm(pm) * np.linalg.norm(stats.mean))
    assert abs(cos + 1) <= 1e-12


def test_ga_equal_counts_coefficient():
    stats = AuxiliaryStats.from_grads(np.array([[1.0, 2.0], [3.0, -1.0]]))
    for lam in (0.5, 1.0, 3.0):
        assert np.allclose(attacks.craft_ga(stats, lam, 2), -(2 * lam + 1) * stats.mean, rtol=1e-15)


def test_ga_scale_equivariance(rng):
    G = rng.standard_normal((5, 4))
    for c in (0.25, 2.0, 1024.0):  # powers of two keep the products exact
        a = attacks.craft_ga(AuxiliaryStats.from_grads(c * G), 1.3, 3)
        b = c * attacks.craft_ga(AuxiliaryStats.from_grads(G), 1.3, 3)
        assert np.array_equal(a, b)


def test_og_example():
    stats = AuxiliaryStats.from_grads([[1.0, 0.0], [1.0, 0.0]])
    for seed in range(10):
        t = attacks.orthogonal_direction(stats.mean, np.random.default_rng(seed))
        gp = attacks.craft_og(stats, 1, np.random.default_rng(seed))
        assert np.allclose(np.abs(t), [0.0, 1.0], atol=1e-15)
        if t[1] > 0:
            assert np.allclose(gp, [-2.0, 3.0], atol=1e-15)
            assert np.allclose(poisoned_mean(stats, gp, 1), [0.0, 1.0], atol=1e-15)
            return
    pytest.fail("no seed produced t = (0, 1)")


def test_og_orthogonality_100_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_a, n_p = rng.integers(1, 20, 2)
        stats = AuxiliaryStats.from_grads(rng.standard_normal((n_a, 8)) * rng.uniform(0.01, 100))
        seed = int(rng.integers(2**31))
        gp = attacks.craft_og(stats, int(n_p), np.random.default_rng(seed))
        pm = poisoned_mean(stats, gp, n_p)
        cos = pm @ stats.mean / (np.linalg.norm(pm) * np.linalg.norm(stats.mean))
        assert abs(cos) <= 1e-10
        assert np.isclose(np.linalg.norm(pm), np.linalg.norm(stats.mean), rtol=1e-10)
        assert np.array_equal(gp, attacks.craft_og(stats, int(n_p), np.random.default_rng(seed)))


def test_og_needs_two_dims():
    with pytest.raises(ValueError):
        attacks.craft_og(AuxiliaryStats.from_grads([[1.0], [2.0]]), 1, np.random.default_rng(0))


def test_lie_example_averaging():
    stats = AuxiliaryStats.from_grads([[1.0, 0.0], [3.0, 0.0]])
    assert stats.std.tolist() == [1.0, 0.0]
    shifts, _ = attacks.lie_shifts(stats, 1, [1.0, 2.0, 5.0], AVG)
    assert np.allclose(shifts, np.array([1.0, 2.0, 5.0]) / 3, rtol=1e-15)
    vec, z = attacks.craft_lie(stats, 1, [1.0, 2.0, 5.0], AVG)
    assert z == 5.0 and vec.tolist() == [-3.0, 0.0]


def test_lie_degenerate_spread():
    stats = AuxiliaryStats.from_grads([[1.0, 2.0]] * 4)
    with pytest.warns(DegenerateAttackWarning):
        vec, z = attacks.craft_lie(stats, 2, attacks.default_z_grid(), AVG)
    assert vec.tolist() == [1.0, 2.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        shifts, _ = attacks.lie_shifts(stats, 2, attacks.default_z_grid(), AVG)
    assert np.all(shifts == 0)


@given(seed=st.integers(0, 2**32 - 1))
def test_lie_averaging_shift_strictly_increasing(seed):
    rng = np.random.default_rng(seed)
    stats = AuxiliaryStats.from_grads(rng.standard_normal((6, 4)))
    grid = attacks.default_z_grid()
    shifts, _ = attacks.lie_shifts(stats, 2, grid, AVG)
    assert np.all(np.diff(shifts) > 0)
    assert attacks.craft_lie(stats, 2, grid, AVG)[1] == grid[-1]


def grid_oracle(stats, n_p, grid, spec):
    """Delta(z) and kept count for every z, using the public aggregate()."""
    G = stats.grads
    base = aggregate(spec, G).aggregate
    deltas, kept = [], []
    for z in grid:
        cand = stats.mean - z * stats.std
        res = aggregate(spec, np.vstack([G, np.tile(cand, (n_p, 1))]))
        deltas.append(np.linalg.norm(res.aggregate - base))
        kept.append(int(np.sum(res.selected >= len(G))))
    return np.array(deltas), np.array(kept)


def test_lie_multikrum_matches_grid_oracle():
    grid = np.logspace(-1, 1, 25)
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n_a, n_p = int(rng.integers(6, 14)), int(rng.integers(1, 3))
        spec = AggregatorSpec("multikrum", float(rng.choice([0.1, 0.2])))
        stats = AuxiliaryStats.from_grads(rng.standard_normal((n_a, 3)))
        deltas, kept = grid_oracle(stats, n_p, grid, spec)
        shifts, counts = attacks.lie_shifts(stats, n_p, grid, spec)
        assert counts.tolist() == kept.tolist()
        assert np.allclose(shifts, deltas, rtol=1e-12, atol=1e-14)
        masked = np.where(kept > 0, deltas, -np.inf) if np.any(kept > 0) else deltas
        _, z = attacks.craft_lie(stats, n_p, grid, spec)
        assert z == grid[int(np.argmax(masked))]


def test_lie_multikrum_small_instance_picks_largest_selected_z():
    # a tight honest cluster: the copies stay selected up to some z, then are dropped
    rng = np.random.default_rng(3)
    stats = AuxiliaryStats.from_grads(rng.normal(0.0, 1.0, (9, 2)))
    grid = np.logspace(-1, 1, 50)
    spec = AggregatorSpec("multikrum", 0.2)
    _, kept = grid_oracle(stats, 1, grid, spec)
    assert kept[0] > 0 and kept[-1] == 0
    _, z = attacks.craft_lie(stats, 1, grid, spec)
    assert z == grid[np.flatnonzero(kept > 0)[-1]]


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("ga", lam=0)
    with pytest.raises(ValueError):
        AttackSpec("lie", z_grid=(1.0, 0.5))
    with pytest.raises(ValueError):
        AttackSpec("lie", z_grid=())
    with pytest.raises(ValueError):
        AttackSpec("nope")
    assert len(attacks.default_z_grid()) == 50
    assert attacks.default_z_grid()[0] == pytest.approx(0.1) and attacks.default_z_grid()[-1] == pytest.approx(10)
