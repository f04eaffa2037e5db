import io

import numpy as np
import pytest

from worktraj.model import (BathSpec, DriveProtocol, eigenstate_ensemble, haar_ensemble,
                            plus_minus_ensemble)
from worktraj.moments import solve_moment_hierarchy
from worktraj.protocols import (ErasureSpec, FeasibilityError, builtin_protocol,
                                optimize_erasure_protocol, path_cost, path_gaps, naive_ramp,
                                quasistatic_cost, read_knots, write_knots)


@pytest.fixture(scope="module")
def optimal_60():
    return optimize_erasure_protocol(ErasureSpec(60.0))


def _final_excited(protocol, bath=BathSpec()):
    return float(solve_moment_hierarchy(eigenstate_ensemble(), protocol, bath, 1)
                 .G[-1, 0, 0, :].sum())


def test_builtin_protocols():
    assert builtin_protocol("linear", 0.5, 4.0).energy(4.0) == pytest.approx(2.0)
    assert builtin_protocol("power", [1.0, 1 / 3], 8.0).energy(8.0) == pytest.approx(2.0)
    assert builtin_protocol("tanh", [2.0], 1.0).energy(1.0) == pytest.approx(np.tanh(2.0))
    assert builtin_protocol("ramp", [3.0], 6.0).energy(2.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        builtin_protocol("power", [1.0], 1.0)
    with pytest.raises(ValueError):
        builtin_protocol("cosine", [1.0], 1.0)


def test_quasistatic_cost_value():
    assert quasistatic_cost(0.5, 0.01) == pytest.approx(0.683096845, abs=1e-9)


def test_short_erasure_is_rejected():
    with pytest.raises(FeasibilityError, match="minimum tau"):
        optimize_erasure_protocol(ErasureSpec(30.0))


def test_equilibrium_path_reproduces_equilibrium_gaps():
    # a path that barely moves sits at the equilibrium gap of its midpoint
    spec = ErasureSpec(1e6, 0.5, 0.4, nodes=4)
    p = np.linspace(0.5, 0.4, 5)
    mid = 0.5 * (p[1:] + p[:-1])
    np.testing.assert_allclose(path_gaps(p, spec), np.log((1 - mid) / mid), atol=1e-4)
    assert np.isinf(path_cost(np.array([0.5, 1e-9, 0.01]), ErasureSpec(1.0, nodes=2)))


def test_cost_does_not_increase_with_duration():
    costs = [optimize_erasure_protocol(ErasureSpec(tau, nodes=100)).cost
             for tau in (50.0, 100.0, 200.0, 400.0)]
    assert all(a >= b for a, b in zip(costs, costs[1:]))
    assert costs[-1] > quasistatic_cost(0.5, 0.01)


def test_optimized_drive_reaches_target_population(optimal_60):
    assert _final_excited(optimal_60.protocol) == pytest.approx(0.01, abs=1e-4)
    mean = solve_moment_hierarchy(eigenstate_ensemble(), optimal_60.protocol, BathSpec(), 1)
    assert mean.mean[-1] == pytest.approx(optimal_60.cost, rel=1e-3)


def test_optimized_drive_beats_linear_ramp(optimal_60):
    ramp = naive_ramp(ErasureSpec(60.0), _final_excited)
    ramp_work = solve_moment_hierarchy(eigenstate_ensemble(), ramp, BathSpec(), 1).mean[-1]
    assert optimal_60.cost <= ramp_work


def test_ohmic_erasure_runs():
    spec = ErasureSpec(50.0, bath=BathSpec(coupling="ohmic", strength=0.1), nodes=20)
    res = optimize_erasure_protocol(spec)
    assert np.all(np.isfinite(res.gaps)) and res.cost > quasistatic_cost(0.5, 0.01)


def test_knot_table_round_trip(optimal_60, tmp_path):
    path = tmp_path / "knots.csv"
    write_knots(optimal_60.protocol, path)
    back = read_knots(path)
    assert back == optimal_60.protocol
    buf = io.StringIO()
    write_knots(optimal_60.protocol, buf)
    buf.seek(0)
    assert read_knots(buf) == optimal_60.protocol
    with pytest.raises(ValueError):
        write_knots(DriveProtocol("linear", (1.0,), 1.0), io.StringIO())


def test_coherent_ensembles_reduce_variance_on_optimal_drive(optimal_60):
    v = {e.name: solve_moment_hierarchy(e, optimal_60.protocol, BathSpec(), 2).variance[-1]
         for e in (eigenstate_ensemble(), haar_ensemble(), plus_minus_ensemble())}
    assert v["EG"] > v["Haar"] > v["PM"]
