import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from worktraj.kernels import build_grid, decay_kernels, null_probability
from worktraj.model import (BathSpec, DriveProtocol, eigenstate_ensemble, haar_ensemble,
                            piecewise_protocol, plus_minus_ensemble, polar_pair)
from worktraj.moments import solve_moment_hierarchy
from worktraj.trajectory import (MomentSums, run_batch, simulate_trajectory, step,
                                 step_table)

LINEAR = DriveProtocol("linear", (0.5,), 5.0)


def test_first_law_holds_per_trajectory(bath):
    res = run_batch(haar_ensemble(), LINEAR, bath, 1e-2, 2000, seed=3)
    E0, E1 = LINEAR.energy(0.0), LINEAR.energy(LINEAR.tau)
    du = res.p_final * E1 - res.p_initial * E0
    assert np.max(np.abs(res.work + res.heat - du)) < 1e-12


def test_same_seed_same_numbers_and_different_seed_differs(bath):
    a = run_batch(polar_pair(0.25), LINEAR, bath, 1e-2, 500, seed=11)
    b = run_batch(polar_pair(0.25), LINEAR, bath, 1e-2, 500, seed=11)
    c = run_batch(polar_pair(0.25), LINEAR, bath, 1e-2, 500, seed=12)
    assert np.array_equal(a.work, b.work)
    assert not np.array_equal(a.work, c.work)


def test_trajectories_do_not_depend_on_evaluation_order(bath, rng):
    ens = plus_minus_ensemble()
    batch = run_batch(ens, LINEAR, bath, 1e-2, 300, seed=5)
    for i in rng.permutation(300)[:25]:
        rec = simulate_trajectory(batch.p_initial[i], LINEAR, bath, 1e-2, 5, int(i),
                                  batch.table)
        assert rec.work == batch.work[i]
        assert rec.heat == batch.heat[i]
        assert rec.final_p_e == batch.p_final[i]


def test_constant_gap_does_no_work(bath):
    flat = piecewise_protocol([0.0, 4.0], [0.7, 0.7])
    res = run_batch(haar_ensemble(), flat, bath, 1e-2, 1000, seed=1)
    assert np.all(res.work == 0.0)


def test_weak_coupling_gives_deterministic_work():
    bath = BathSpec(strength=1e-12, gap_floor=1.0)
    res = run_batch(polar_pair(0.25), LINEAR, bath, 1e-2, 1000, seed=2)
    assert np.all(res.n_jumps == 0)
    np.testing.assert_allclose(res.work, res.p_initial * 2.5, rtol=1e-9)


def test_single_trajectory_statistics(bath):
    res = run_batch(plus_minus_ensemble(), LINEAR, bath, 1e-2, 1, seed=0)
    assert res.stats.single_sample and res.stats.count == 1
    assert res.stats.variance == 0.0


def test_step_rejects_large_time_step(bath):
    with pytest.raises(ValueError):
        step(0.5, 0.0, 1.0, LINEAR, bath, 0.3)
    p, event, dw, dq = step(0.5, 1.0, 1e-3, LINEAR, bath, 0.999)
    assert event == "null" and dw > 0


@pytest.mark.slow
def test_batch_agrees_with_hierarchy(bath):
    for ens in (eigenstate_ensemble(), plus_minus_ensemble()):
        ms = solve_moment_hierarchy(ens, LINEAR, bath, 2)
        st_ = run_batch(ens, LINEAR, bath, 1e-3, 20_000, seed=17).stats
        assert abs(st_.mean - ms.mean[-1]) < 4 * st_.se_mean
        assert abs(st_.variance - ms.variance[-1]) < 4 * st_.se_variance


def test_null_update_tracks_survival_kernels(ohmic):
    table = step_table(LINEAR, ohmic, 1e-2)
    k = decay_kernels(LINEAR, ohmic, build_grid(LINEAR, ohmic))
    assert np.prod(table.stay_excited) == pytest.approx(k.excited[-1], rel=1e-9)
    assert np.prod(table.stay_ground) == pytest.approx(k.ground[-1], rel=1e-9)


def test_jump_free_fraction_matches_null_probability(ohmic):
    n = 20_000
    res = run_batch(plus_minus_ensemble(), LINEAR, ohmic, 1e-2, n, seed=23)
    k = decay_kernels(LINEAR, ohmic, build_grid(LINEAR, ohmic))
    p = null_probability(0.5, k, LINEAR.tau)
    observed = np.mean(res.n_jumps == 0)
    assert abs(observed - p) < 3 * np.sqrt(p * (1 - p) / n)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=60), st.integers(1, 59))
def test_streaming_sums_merge_like_one_pass(xs, cut):
    x = np.array(xs)
    cut = min(cut, x.size - 1)
    merged = MomentSums.of(x[:cut]).merge(MomentSums.of(x[cut:]))
    whole = MomentSums.of(x)
    assert merged.n == whole.n
    scale = 1.0 + np.max(np.abs(x))
    for a, b, p in ((merged.mean, whole.mean, 1), (merged.m2, whole.m2, 2),
                    (merged.m3, whole.m3, 3), (merged.m4, whole.m4, 4)):
        assert a == pytest.approx(b, abs=1e-9 * x.size * scale ** p)
