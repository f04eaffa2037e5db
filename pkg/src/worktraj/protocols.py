"""Built-in drive schedules and the minimum-mean-work erasure optimizer.

The optimizer works on the excited-population path ``p(t)`` sampled on ``M + 1``
equally spaced nodes.  On every interval the rate equation
``pdot = r_up(E) - (r_down(E) + r_up(E)) p`` is solved for the gap ``E`` at the
interval midpoint, so a population path fixes the drive.  The mean work of the
resulting drive, ``p_end E_last - int E dp``, is then minimized over the interior
nodes.  The gap starts at ``E = 0`` and may rise steeply over the first half step.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .model import BathSpec, DriveProtocol, piecewise_protocol, rates

log = logging.getLogger(__name__)

BUILTIN_NAMES = ("linear", "power", "tanh", "ramp")
_BARRIER = 1e6


class FeasibilityError(ValueError):
    """The requested erasure cannot be reached in the given time."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


def builtin_protocol(name: str, params, tau: float) -> DriveProtocol:
    """``linear(c)``, ``power(c, p)``, ``tanh(a)`` or ``ramp(E_f)`` on ``[0, tau]``."""
    if name not in BUILTIN_NAMES:
        raise ValueError(f"unknown protocol {name!r}; expected one of {BUILTIN_NAMES}")
    expected = 2 if name == "power" else 1
    params = tuple(float(x) for x in np.atleast_1d(params))
    if len(params) != expected:
        raise ValueError(f"{name} takes {expected} parameter(s), got {len(params)}")
    return DriveProtocol(name, params, float(tau))


@dataclass(frozen=True)
class ErasureSpec:
    tau: float
    p_start: float = 0.5
    p_end: float = 0.01
    bath: BathSpec = field(default_factory=BathSpec)
    nodes: int = 200

    def __post_init__(self) -> None:
        if not 0 < self.p_end < self.p_start <= 0.5:
            raise ValueError("need 0 < p_end < p_start <= 1/2")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.nodes < 2:
            raise ValueError("need at least two intervals")

    @property
    def step(self) -> float:
        return self.tau / self.nodes


@dataclass(frozen=True)
class ErasureResult:
    protocol: DriveProtocol
    cost: float                 # mean work of the discrete path
    populations: np.ndarray     # optimized p at the M + 1 nodes
    gaps: np.ndarray            # E at the M interval midpoints
    iterations: int


def _max_log_decay(spec: ErasureSpec) -> float | None:
    """Largest total ``ln p`` drop the discrete rate equation allows, or None if unbounded."""
    if spec.bath.coupling != "constant":
        return None
    x = 0.5 * spec.step * spec.bath.strength
    if x >= 1:
        return None
    return spec.nodes * np.log((1 + x) / (1 - x))


def check_feasible(spec: ErasureSpec) -> None:
    """Reject erasures faster than decay at the zero-temperature rate allows.

    The fastest admissible step has ``nbar = 0`` (infinite gap), which gives
    ``p_(i+1) = p_i (1 - g h/2) / (1 + g h/2)`` for constant coupling ``g``.
    """
    limit = _max_log_decay(spec)
    if limit is None:
        return
    need = np.log(spec.p_start / spec.p_end)
    if need >= limit:
        # with every step at the limit, find the first node that misses the target
        per_step = limit / spec.nodes
        node = int(np.ceil(need / per_step))
        raise FeasibilityError(
            f"p_end = {spec.p_end} unreachable in tau = {spec.tau}: the fastest decay "
            f"needs node {node} of {spec.nodes} (minimum tau ~ "
            f"{need / spec.bath.strength:.4g})")


def _gap_from_occupation(nbar, beta):
    return np.log1p(1.0 / nbar) / beta


def _solve_gap_ohmic(pdot: float, p: float, bath: BathSpec) -> float:
    def residual(E):
        down, up = rates(E, bath)
        return up - (down + up) * p - pdot
    lo, hi = 1e-12, 1.0
    if residual(lo) < 0:
        return np.nan
    while residual(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            return np.nan
    return optimize.brentq(residual, lo, hi, xtol=1e-14, rtol=1e-14)


def path_gaps(p: np.ndarray, spec: ErasureSpec) -> np.ndarray:
    """Midpoint gaps that make the rate equation reproduce the population path.

    Entries are NaN where no finite positive gap exists.
    """
    h = spec.step
    mid = 0.5 * (p[1:] + p[:-1])
    pdot = np.diff(p) / h
    bath = spec.bath
    if bath.coupling == "constant":
        with np.errstate(divide="ignore", invalid="ignore"):
            nbar = (pdot / bath.strength + mid) / (1.0 - 2.0 * mid)
            E = np.where(nbar > 0, _gap_from_occupation(nbar, bath.beta), np.nan)
        return E
    return np.array([_solve_gap_ohmic(d, m, bath) for d, m in zip(pdot, mid)])


def path_cost(p: np.ndarray, spec: ErasureSpec) -> float:
    """Mean work ``p_end E_last + sum E_mid (p_i - p_(i+1))`` of a population path."""
    E = path_gaps(p, spec)
    if not np.all(np.isfinite(E)):
        return np.inf
    return float(p[-1] * E[-1] - np.sum(E * np.diff(p)))


def _exponential_path(spec: ErasureSpec) -> np.ndarray:
    return spec.p_start * (spec.p_end / spec.p_start) ** np.linspace(0, 1, spec.nodes + 1)


def _local_cost(p, i, spec):
    """Terms of the cost that involve node ``i`` (intervals i-1 and i)."""
    lo, hi = i - 1, min(i + 1, spec.nodes)
    seg = p[lo:hi + 1]
    sub = ErasureSpec(spec.step * (hi - lo), spec.p_start, spec.p_end, spec.bath, hi - lo)
    E = path_gaps(seg, sub)
    if not np.all(np.isfinite(E)):
        return np.inf
    total = -np.sum(E * np.diff(seg))
    if hi == spec.nodes:
        total += p[-1] * E[-1]
    return float(total)


def _coordinate_pass(p: np.ndarray, spec: ErasureSpec) -> np.ndarray:
    p = p.copy()
    for i in range(1, spec.nodes):
        upper, lower = p[i - 1], p[i + 1]
        if upper - lower < 1e-15:
            continue

        def f(x):
            q = p.copy()
            q[i] = x
            c = _local_cost(q, i, spec)
            return c if np.isfinite(c) else _BARRIER

        res = optimize.minimize_scalar(f, bounds=(lower, upper), method="bounded",
                                       options={"xatol": 1e-12 * upper})
        if res.fun <= f(p[i]):
            p[i] = res.x
    return p


def _unpack(z: np.ndarray, spec: ErasureSpec) -> np.ndarray:
    """Softmax log-decrements: a monotone path with exact endpoints."""
    w = np.exp(z - z.max())
    drop = np.log(spec.p_start / spec.p_end) * w / w.sum()
    return spec.p_start * np.exp(-np.concatenate([[0.0], np.cumsum(drop)]))


def _pack(p: np.ndarray) -> np.ndarray:
    drop = np.maximum(-np.diff(np.log(p)), 1e-300)
    return np.log(drop)


def optimize_erasure_protocol(spec: ErasureSpec, sweeps: int = 20, polish_iter: int = 500,
                              tol: float = 1e-10) -> ErasureResult:
    """Minimum-mean-work drive taking the excited population from ``p_start`` to ``p_end``.

    Coordinate-descent sweeps over the interior nodes are followed by an
    L-BFGS-B polish with finite-difference gradients.  Raises
    :class:`FeasibilityError` when ``tau`` is too short.
    """
    check_feasible(spec)
    p = _exponential_path(spec)
    cost = path_cost(p, spec)
    if not np.isfinite(cost):
        # start from a path that spends the allowed decay evenly
        p = _unpack(np.zeros(spec.nodes), spec)
        cost = path_cost(p, spec)
        if not np.isfinite(cost):
            raise FeasibilityError("no finite-gap starting path found")
    iterations = 0
    for iterations in range(1, sweeps + 1):
        p_new = _coordinate_pass(p, spec)
        new_cost = path_cost(p_new, spec)
        improved = cost - new_cost
        p, cost = p_new, min(cost, new_cost)
        if improved < tol * max(1.0, abs(cost)):
            break

    def objective(z):
        c = path_cost(_unpack(z, spec), spec)
        return c if np.isfinite(c) else _BARRIER

    res = optimize.minimize(objective, _pack(p), method="L-BFGS-B",
                            options={"maxiter": polish_iter, "ftol": 1e-15, "gtol": 1e-10})
    if res.fun < cost:
        p, cost = _unpack(res.x, spec), float(res.fun)
    if not np.isfinite(cost):
        raise ConvergenceError("optimizer did not reach a finite cost", best=p)
    gaps = path_gaps(p, spec)
    log.debug("erasure tau=%g cost=%.8g after %d sweeps", spec.tau, cost, iterations)
    return ErasureResult(gap_protocol(gaps, spec.tau), cost, p, gaps, iterations)


def gap_protocol(gaps: np.ndarray, tau: float) -> DriveProtocol:
    """Piecewise-linear drive from ``E = 0`` through the midpoint gaps to ``t = tau``."""
    m = gaps.size
    h = tau / m
    times = np.concatenate([[0.0], (np.arange(m) + 0.5) * h, [tau]])
    energies = np.concatenate([[0.0], gaps, [gaps[-1]]])
    return piecewise_protocol(times, energies)


def naive_ramp(spec: ErasureSpec, final_population, bracket=None) -> DriveProtocol:
    """Linear ramp ``E = E_f t / tau`` with ``E_f`` tuned so that the population ends at ``p_end``.

    ``final_population(protocol)`` evaluates the excited population at ``tau``.  The
    default bracket starts at the gap whose equilibrium population is ``p_end``: a
    finite-time ramp always lags behind equilibrium, so it cannot undershoot there.
    """
    def miss(E_f):
        return final_population(DriveProtocol("ramp", (E_f,), spec.tau)) - spec.p_end
    if bracket is None:
        lo = np.log((1 - spec.p_end) / spec.p_end) / spec.bath.beta
        bracket = (lo, 60.0 / spec.bath.beta)
    lo, hi = bracket
    if miss(hi) > 0:
        raise FeasibilityError(f"no ramp reaches p_end = {spec.p_end} in tau = {spec.tau}")
    E_f = optimize.brentq(miss, lo, hi, xtol=1e-10)
    return DriveProtocol("ramp", (E_f,), spec.tau)


def quasistatic_cost(p_start: float, p_end: float, beta: float = 1.0) -> float:
    """Free-energy change between equilibria at ``p_start`` and ``p_end``."""
    def free(p):
        E = np.log((1 - p) / p) / beta
        return -np.log1p(np.exp(-beta * E)) / beta
    return float(free(p_end) - free(p_start))


def write_knots(protocol: DriveProtocol, target) -> None:
    """Knot table ``t,E`` for a piecewise-linear drive."""
    if protocol.kind != "piecewise":
        raise ValueError("only piecewise drives have a knot table")
    own = isinstance(target, (str, Path))
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "E"])
        for t, e in zip(protocol.knot_times, protocol.knot_energies):
            w.writerow([repr(float(t)), repr(float(e))])
    finally:
        if own:
            fh.close()


def read_knots(source) -> DriveProtocol:
    text = Path(source).read_text() if isinstance(source, (str, Path)) else source.read()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if rows[0] != ["t", "E"]:
        raise ValueError("knot table must start with a 't,E' header")
    data = np.array(rows[1:], dtype=float)
    return piecewise_protocol(data[:, 0], data[:, 1])
