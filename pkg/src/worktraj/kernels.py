"""Time grids and the no-jump segment: decay kernels, null work, coherence weight.

Everything lives on a *fine* grid made of step nodes plus the midpoint of every
step.  Cumulative integrals use Simpson's rule on each (start, mid, end) triple,
and the RK4 solvers in :mod:`worktraj.moments` read the same nodes, so no
interpolation is needed inside a solver step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit

from .model import BathSpec, DriveProtocol, EnsembleSpec, rates


class ResolutionError(RuntimeError):
    """Raised when a grid refinement changes a result beyond tolerance."""


@dataclass(frozen=True)
class TimeGrid:
    steps: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.steps, dtype=float)
        if s.ndim != 1 or s.size < 2 or s[0] != 0.0 or np.any(np.diff(s) <= 0):
            raise ValueError("grid must start at 0 and increase strictly")

    @property
    def fine(self) -> np.ndarray:
        s = self.steps
        out = np.empty(2 * s.size - 1)
        out[0::2] = s
        out[1::2] = 0.5 * (s[:-1] + s[1:])
        return out

    @property
    def n_steps(self) -> int:
        return self.steps.size - 1

    def refined(self) -> "TimeGrid":
        return TimeGrid(self.fine)

    def truncated(self, t_end: float) -> "TimeGrid":
        s = self.steps[self.steps <= t_end * (1 + 1e-12)]
        return TimeGrid(s)


def uniform_grid(tau: float, steps: int) -> TimeGrid:
    return TimeGrid(np.linspace(0.0, tau, steps + 1))


def build_grid(protocol: DriveProtocol, bath: BathSpec, steps: int = 2000,
               rate_resolution: float = 0.01, growth: float = 0.1,
               first_fraction: float = 1e-24, t_end: float | None = None) -> TimeGrid:
    """Step nodes on ``[0, t_end]`` adapted to large rates and singular drives.

    The base spacing is ``tau / steps``.  Steps shrink so that
    ``h * (r_down + r_up) <= rate_resolution``, and for drives with a divergent
    rate at t = 0 the nodes grow geometrically (``h <= growth * t``) from
    ``first_fraction * tau``.  Knots of piecewise drives are always nodes.
    """
    t_end = protocol.tau if t_end is None else float(t_end)
    base = protocol.tau / steps
    knots = [k for k in protocol.breakpoints() if 0 < k < t_end]
    crossing = _floor_crossing(protocol, bath, t_end)
    if crossing is not None:
        knots.append(crossing)
    knots = sorted(set(knots))
    knots.append(t_end)
    nodes = [0.0]
    t = 0.0
    k = 0

    def rate_bound(x):
        d, u = rates(protocol.energy(x), bath)
        return rate_resolution / float(d + u)

    while t < t_end:
        h = base
        if protocol.singular_start:
            h = min(h, first_fraction * protocol.tau if t == 0.0 else growth * t)
        h = min(h, rate_bound(t))
        h = min(h, rate_bound(min(t + h, t_end)))
        target = knots[k]
        if t + h >= target - 0.25 * h:
            t = target
            k += 1
        else:
            t = t + h
        nodes.append(t)
    return TimeGrid(np.asarray(nodes))


def _floor_crossing(protocol: DriveProtocol, bath: BathSpec, t_end: float) -> float | None:
    """First time the gap reaches the floor; the clamped rates have a kink there."""
    if bath.coupling != "constant":
        return None
    floor = bath.gap_floor
    ts = np.linspace(0.0, t_end, 4097)
    above = protocol.energy(ts) >= floor
    if above[0] or not above.any():
        return None
    i = int(np.argmax(above))
    lo, hi = ts[i - 1], ts[i]
    try:
        return float(optimize.brentq(lambda x: float(protocol.energy(x)) - floor, lo, hi,
                                     xtol=1e-15 * max(hi, 1e-300), rtol=1e-15))
    except ValueError:
        return None


@dataclass(frozen=True)
class GridSamples:
    """Drive and rates sampled on the fine grid.

    ``rate_right`` / ``rate_left`` are the one-sided drive rates used at the start
    and at the end of a step respectively; they differ only at piecewise knots.
    """

    t: np.ndarray
    energy: np.ndarray
    rate_right: np.ndarray
    rate_left: np.ndarray
    accel: np.ndarray
    down: np.ndarray
    up: np.ndarray

    @property
    def relax(self) -> np.ndarray:
        return self.down + self.up


def sample_grid(protocol: DriveProtocol, bath: BathSpec, grid: TimeGrid) -> GridSamples:
    t = grid.fine
    E = protocol.energy(t)
    right = np.asarray(protocol.energy_rate(t, side=1), dtype=float).copy()
    left = np.asarray(protocol.energy_rate(t, side=-1), dtype=float).copy()
    accel = np.asarray(protocol.energy_accel(t), dtype=float).copy()
    if protocol.singular_start:
        # Replace the infinite rate at t = 0 by the value that makes Simpson's
        # rule (and hence RK4) reproduce E(t1) - E(0) exactly on the first step.
        h = 0.5 * (t[2] - t[0])
        value = 3.0 * (E[2] - E[0]) / h - 4.0 * right[1] - left[2]
        right[0] = left[0] = value
        accel[0] = 0.0
    down, up = rates(E, bath)
    return GridSamples(t, E, right, left, accel, np.asarray(down), np.asarray(up))


def pair_cumulative(t: np.ndarray, f_right: np.ndarray,
                    f_left: np.ndarray | None = None) -> np.ndarray:
    """Cumulative Simpson integral on a fine grid (step nodes plus midpoints).

    ``f_right[..., 2i]`` is the integrand at the start of step i, ``f_left[..., 2i+2]``
    its value at the end of the step; midpoint values come from ``f_right``.
    Midpoint nodes get the integral of the interpolating parabola.
    """
    if f_left is None:
        f_left = f_right
    f0 = f_right[..., 0:-1:2]
    fm = f_right[..., 1::2]
    f1 = f_left[..., 2::2]
    h = 0.5 * (t[2::2] - t[0:-1:2])
    full = h / 3.0 * (f0 + 4.0 * fm + f1)
    half = h / 12.0 * (5.0 * f0 + 8.0 * fm - f1)
    out = np.empty(np.broadcast(f_right, f_left).shape, dtype=float)
    out[..., 0] = 0.0
    cum = np.cumsum(full, axis=-1)
    out[..., 2::2] = cum
    out[..., 1::2] = half
    out[..., 3::2] += cum[..., :-1]
    return out


@dataclass(frozen=True)
class DecayKernels:
    """Survival kernels of the excited and ground components on a fine grid."""

    grid: TimeGrid
    samples: GridSamples
    log_excited: np.ndarray
    log_ground: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.samples.t

    @property
    def excited(self) -> np.ndarray:
        return np.exp(-self.log_excited)

    @property
    def ground(self) -> np.ndarray:
        return np.exp(-self.log_ground)


def decay_kernels(protocol: DriveProtocol, bath: BathSpec, grid: TimeGrid) -> DecayKernels:
    s = sample_grid(protocol, bath, grid)
    return DecayKernels(grid, s, pair_cumulative(s.t, s.down), pair_cumulative(s.t, s.up))


def kernel_resolution_defect(protocol: DriveProtocol, bath: BathSpec, grid: TimeGrid) -> float:
    """Largest change of either kernel at the step nodes when every step is halved."""
    coarse = decay_kernels(protocol, bath, grid)
    fine = decay_kernels(protocol, bath, grid.refined())
    idx = np.arange(0, fine.t.size, 4)
    return float(max(np.max(np.abs(coarse.excited[::2] - fine.excited[idx])),
                     np.max(np.abs(coarse.ground[::2] - fine.ground[idx]))))


def check_kernel_resolution(protocol, bath, grid, tol: float = 1e-6) -> float:
    defect = kernel_resolution_defect(protocol, bath, grid)
    if defect > tol:
        raise ResolutionError(f"kernel grid too coarse: halving steps moved K by {defect:.3g}")
    return defect


def _excited_fraction(p_e, log_e, log_g):
    """p_e K_e / (p_e K_e + p_g K_g), evaluated in log space."""
    p_e = np.asarray(p_e, dtype=float)[..., None]
    with np.errstate(divide="ignore"):
        logit = np.log(p_e) - np.log1p(-p_e) - (log_e - log_g)
    return np.clip(expit(logit), 0.0, 1.0)


@dataclass(frozen=True)
class NullSegment:
    """Per-preparation no-jump quantities on the fine grid (rows = preparations)."""

    kernels: DecayKernels
    p_e: np.ndarray
    weights: np.ndarray
    work: np.ndarray
    probability: np.ndarray
    coherence: np.ndarray
    excited_fraction: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.kernels.t

    def mean_coherence(self) -> np.ndarray:
        return self.weights @ self.coherence

    def moment_source(self, n: int) -> np.ndarray:
        """Diagonal of C_n on the fine grid as ``(excited, ground)`` arrays.

        Returns the drive-rate-free factor ``n * sum_i w_i W_i^(n-1) a_i``; the caller
        multiplies by dE/dt with the appropriate one-sided limit.
        """
        if n == 0:
            return np.zeros_like(self.t)
        return n * (self.weights @ (self.work ** (n - 1) * self.coherence))

    def mgf_source(self, u: float) -> np.ndarray:
        """sum_i w_i exp(-u W_i) a_i; times u dE/dt gives the excited entry of C_null."""
        return self.weights @ (np.exp(-u * self.work) * self.coherence)


def null_segment(kernels: DecayKernels, p_e, weights=None) -> NullSegment:
    p_e = np.atleast_1d(np.asarray(p_e, dtype=float))
    weights = np.ones_like(p_e) / p_e.size if weights is None else np.asarray(weights, float)
    s = kernels.samples
    frac = _excited_fraction(p_e, kernels.log_excited, kernels.log_ground)
    frac_left = frac
    work = pair_cumulative(s.t, frac * s.rate_right, frac_left * s.rate_left)
    K_e = np.exp(-kernels.log_excited)
    K_g = np.exp(-kernels.log_ground)
    pe = p_e[:, None]
    prob = pe * K_e + (1.0 - pe) * K_g
    coherence = pe * K_e * (1.0 - frac)
    coherence = np.where((pe == 0.0) | (pe == 1.0), 0.0, coherence)
    return NullSegment(kernels, p_e, weights, work, prob, coherence, frac)


def ensemble_null_segment(ensemble: EnsembleSpec, kernels: DecayKernels) -> NullSegment:
    p, w = ensemble.quadrature()
    return null_segment(kernels, p, w)


def _at(kernels: DecayKernels, values: np.ndarray, t):
    return np.interp(t, kernels.t, values) if values.ndim == 1 else np.array(
        [np.interp(t, kernels.t, row) for row in values])


def null_work(p_e: float, kernels: DecayKernels, t):
    seg = null_segment(kernels, [p_e])
    return _at(kernels, seg.work[0], t)


def null_probability(p_e: float, kernels: DecayKernels, t):
    seg = null_segment(kernels, [p_e])
    return _at(kernels, seg.probability[0], t)


def coherence_weight(p_e: float, kernels: DecayKernels, t):
    seg = null_segment(kernels, [p_e])
    return _at(kernels, seg.coherence[0], t)


def ensemble_coherence_weight(ensemble: EnsembleSpec, kernels: DecayKernels, t):
    seg = ensemble_null_segment(ensemble, kernels)
    return _at(kernels, seg.mean_coherence(), t)


def coherence_source_moment(ensemble: EnsembleSpec, kernels: DecayKernels,
                            protocol: DriveProtocol, t, n: int) -> np.ndarray:
    """C_n(t) as 2x2 matrices in (e, g) ordering; shape ``t.shape + (2, 2)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    seg = ensemble_null_segment(ensemble, kernels)
    t = np.asarray(t, dtype=float)
    x = np.interp(t, kernels.t, seg.moment_source(n)) * protocol.energy_rate(t)
    out = np.zeros(t.shape + (2, 2))
    out[..., 0, 0] = -x
    out[..., 1, 1] = x
    return out


def coherence_source_mgf(ensemble: EnsembleSpec, kernels: DecayKernels,
                         protocol: DriveProtocol, u: float, t) -> np.ndarray:
    """C_null(u, t) via the coherence-weight identity."""
    seg = ensemble_null_segment(ensemble, kernels)
    t = np.asarray(t, dtype=float)
    x = u * protocol.energy_rate(t) * np.interp(t, kernels.t, seg.mgf_source(u))
    out = np.zeros(t.shape + (2, 2))
    out[..., 0, 0] = x
    out[..., 1, 1] = -x
    return out


def coherence_source_mgf_direct(ensemble: EnsembleSpec, kernels: DecayKernels,
                                protocol: DriveProtocol, u: float, t) -> np.ndarray:
    """C_null(u, t) from the weighted product of tilt, power mismatch and null projector."""
    seg = ensemble_null_segment(ensemble, kernels)
    t = np.asarray(t, dtype=float)
    edot = protocol.energy_rate(t)
    out = np.zeros(t.shape + (2, 2))
    K_e = np.interp(t, kernels.t, kernels.excited)
    K_g = np.interp(t, kernels.t, kernels.ground)
    for pe, w, W in zip(seg.p_e, seg.weights, seg.work):
        Wt = np.interp(t, kernels.t, W)
        P = pe * K_e + (1 - pe) * K_g
        wdot = edot * pe * K_e / P
        tilt = w * np.exp(-u * Wt) * u
        out[..., 0, 0] += tilt * (edot - wdot) * pe * K_e
        out[..., 1, 1] += tilt * (0.0 - wdot) * (1 - pe) * K_g
    return out
