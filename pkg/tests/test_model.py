import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from worktraj.model import (BathSpec, DriveProtocol, EnsembleSpec, PurePrep,
                            eigenstate_ensemble, equilibrium_population, free_energy_change,
                            free_energy_change_quad, haar_ensemble, named_ensemble, occupation,
                            plus_minus_ensemble, polar_pair, rates, relaxation_rate)

gaps = st.floats(0.0, 50.0)
betas = st.floats(0.1, 5.0)


def test_occupation_uses_gap_floor():
    bath = BathSpec(gap_floor=1e-4)
    # 1 / expm1(1e-4)
    assert occupation(0.0, bath) == pytest.approx(9999.500008333, rel=1e-10)


def test_constant_coupling_rates_at_unit_gap(bath):
    down, up = rates(1.0, bath)
    nbar = 1.0 / (np.e - 1.0)
    assert down == pytest.approx(0.1 * (nbar + 1.0), rel=1e-12)
    assert up == pytest.approx(0.1 * nbar, rel=1e-12)
    assert down == pytest.approx(0.158198, abs=1e-6)
    assert up == pytest.approx(0.058198, abs=1e-6)


def test_equilibrium_population_and_free_energy():
    assert equilibrium_population(1.0, 1.0) == pytest.approx(0.268941, abs=1e-6)
    ramp = DriveProtocol("ramp", (1.0,), 3.0)
    assert free_energy_change(ramp, 1.0) == pytest.approx(0.379885, abs=1e-6)
    big = DriveProtocol("ramp", (80.0,), 1.0)
    assert free_energy_change(big, 1.0) == pytest.approx(np.log(2.0), abs=1e-12)


def test_ohmic_rates_at_zero_gap(ohmic):
    down, up = rates(0.0, ohmic)
    assert down == pytest.approx(0.1)
    assert up == pytest.approx(0.1)


@given(gaps, betas, st.sampled_from(["constant", "ohmic"]))
def test_rates_are_finite_and_obey_detailed_balance(E, beta, coupling):
    bath = BathSpec(beta=beta, coupling=coupling)
    down, up = rates(E, bath)
    assert np.isfinite(down) and np.isfinite(up)
    assert down >= up >= 0
    if E > 1e-3 and beta * E < 30:
        assert up / down == pytest.approx(np.exp(-beta * E), rel=1e-9)
    assert relaxation_rate(E, bath) == pytest.approx(down + up)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(0.5, 20.0), betas)
def test_free_energy_closed_form_matches_quadrature(scale, tau, beta):
    p = DriveProtocol("power", (scale, 0.5), tau)
    for t in (0.3 * tau, tau):
        assert free_energy_change(p, beta, t) == pytest.approx(
            free_energy_change_quad(p, beta, t), abs=1e-10)


def test_named_ensembles_share_the_maximally_mixed_state():
    for ens in (eigenstate_ensemble(), plus_minus_ensemble(), haar_ensemble(),
                polar_pair(0.25), named_ensemble("polar(0.1)")):
        assert ens.mean_excited() == pytest.approx(0.5, abs=1e-12)
    assert eigenstate_ensemble().is_classical()
    assert not plus_minus_ensemble().is_classical()


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.01, 1)), min_size=1, max_size=6))
def test_ensemble_mean_is_weighted_average(items):
    total = sum(w for _, w in items)
    preps = tuple(PurePrep(p, w / total) for p, w in items)
    try:
        ens = EnsembleSpec("custom", preps)
    except ValueError:
        return  # rounding pushed the weight sum past 1e-12
    expected = sum(p.p_e * p.weight for p in preps)
    assert ens.mean_excited() == pytest.approx(expected, abs=1e-12)


def test_ensemble_sampling_matches_quadrature(rng):
    u = rng.random(200_000)
    assert haar_ensemble().sample(u).mean() == pytest.approx(0.5, abs=5e-3)
    assert eigenstate_ensemble().sample(u).mean() == pytest.approx(0.5, abs=5e-3)
    assert set(np.unique(plus_minus_ensemble().sample(u))) == {0.5}


def test_protocol_round_trip_and_validation():
    p = DriveProtocol("power", (1.0, 1.0 / 3.0), 7.0)
    assert DriveProtocol.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        DriveProtocol("linear", (-1.0,), 1.0)
    with pytest.raises(ValueError):
        DriveProtocol("linear", (1.0,), 0.0)
    with pytest.raises(ValueError):
        BathSpec(coupling="superohmic")
