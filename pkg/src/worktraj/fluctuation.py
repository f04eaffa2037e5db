"""Dissipated work, the Jarzynski deviation xi, the Jensen bound, the closed-form
variance and slow-driving fluctuation-dissipation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.special import expit

from .kernels import DecayKernels, TimeGrid, build_grid, decay_kernels, ensemble_null_segment, \
    pair_cumulative
from .model import BathSpec, DriveProtocol, EnsembleSpec, coupling_rate, free_energy_change
from .moments import solve_mgf, solve_moment_hierarchy

BOUND_CAP = 1e6


class XiRangeError(ValueError):
    pass


def dissipated_work(mean_work, delta_f):
    return np.asarray(mean_work) - np.asarray(delta_f)


@dataclass(frozen=True)
class XiResult:
    t: np.ndarray
    xi: np.ndarray
    route: str
    rate: np.ndarray | None = None  # d xi / dt where the route provides it

    def bound(self, beta: float) -> np.ndarray:
        return jensen_bound(self, beta)[0]


def _require_equilibrium_start(ensemble: EnsembleSpec, protocol: DriveProtocol) -> None:
    if abs(float(protocol.energy(0.0))) > 1e-14:
        raise ValueError("xi requires E(0) = 0")
    if abs(ensemble.mean_excited() - 0.5) > 1e-12:
        raise ValueError("xi requires an initial excited population of 1/2")


def xi_from_mgf(mgf_beta: np.ndarray, t: np.ndarray, protocol: DriveProtocol, beta: float,
                strict: bool = True) -> XiResult:
    """xi(t) = 1 - 2 G(beta, t) / (1 + exp(-beta E_t))."""
    E = protocol.energy(t)
    xi = 1.0 - 2.0 * np.asarray(mgf_beta) / (1.0 + np.exp(-beta * E))
    if strict and (np.any(xi < -1e-8) or np.any(xi >= 1.0)):
        raise XiRangeError(f"xi outside [0, 1): min {xi.min():.3g}, max {xi.max():.3g}")
    return XiResult(np.asarray(t), xi, "mgf-ansatz")


def xi_mgf_route(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                 kernels: DecayKernels | None = None, steps: int = 2000) -> XiResult:
    _require_equilibrium_start(ensemble, protocol)
    kernels = _kernels(protocol, bath, kernels, steps)
    m = solve_mgf(ensemble, protocol, bath, [bath.beta], kernels=kernels)
    return xi_from_mgf(m.value[0], m.t, protocol, bath.beta)


def _kernels(protocol, bath, kernels, steps):
    if kernels is None:
        kernels = decay_kernels(protocol, bath, build_grid(protocol, bath, steps))
    return kernels


@dataclass(frozen=True)
class XiCoefficients:
    """Coefficients of the xi equation on the fine grid.

    With ``xi' = Edot * v`` the second-order equation ``xi'' + phi xi' = alpha``
    becomes ``v' = -damping * v + source`` where ``phi = damping - Eddot / Edot``
    and ``alpha = Edot * source``.
    """

    t: np.ndarray
    edot_right: np.ndarray
    edot_left: np.ndarray
    accel: np.ndarray
    damping_right: np.ndarray
    damping_left: np.ndarray
    source_right: np.ndarray
    source_left: np.ndarray

    def phi(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.damping_right - self.accel / self.edot_right

    def alpha(self) -> np.ndarray:
        return self.edot_right * self.source_right


def xi_coefficients(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                    kernels: DecayKernels) -> XiCoefficients:
    beta = bath.beta
    s = kernels.samples
    seg = ensemble_null_segment(ensemble, kernels)
    half = np.tanh(0.5 * beta * s.energy)
    damping_r = beta * s.rate_right * half + s.relax
    damping_l = beta * s.rate_left * half + s.relax
    # alpha / Edot = 2 beta^2 Edot sigmoid(beta E) sum_i w_i exp(-beta W_i) a_i
    weight = 2.0 * beta * beta * expit(beta * s.energy) * seg.mgf_source(beta)
    return XiCoefficients(s.t, s.rate_right, s.rate_left, s.accel, damping_r, damping_l,
                          weight * s.rate_right, weight * s.rate_left)


@numba.njit(cache=True)
def _xi_rk4(t, edot_r, edot_l, damp_r, damp_l, src_r, src_l):
    n_steps = (t.shape[0] - 1) // 2
    xi = np.zeros(n_steps + 1)
    vs = np.zeros(n_steps + 1)
    x = 0.0
    v = 0.0
    for i in range(n_steps):
        a, m, b = 2 * i, 2 * i + 1, 2 * i + 2
        h = t[b] - t[a]
        k1x = edot_r[a] * v
        k1v = -damp_r[a] * v + src_r[a]
        v2 = v + 0.5 * h * k1v
        k2x = edot_r[m] * v2
        k2v = -damp_r[m] * v2 + src_r[m]
        v3 = v + 0.5 * h * k2v
        k3x = edot_r[m] * v3
        k3v = -damp_r[m] * v3 + src_r[m]
        v4 = v + h * k3v
        k4x = edot_l[b] * v4
        k4v = -damp_l[b] * v4 + src_l[b]
        x += h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        xi[i + 1] = x
        vs[i + 1] = v
    return xi, vs


def xi_from_ode(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                kernels: DecayKernels | None = None, steps: int = 2000) -> XiResult:
    """Integrate xi'' + phi xi' = alpha with xi(0) = xi'(0) = 0."""
    _require_equilibrium_start(ensemble, protocol)
    kernels = _kernels(protocol, bath, kernels, steps)
    c = xi_coefficients(ensemble, protocol, bath, kernels)
    xi, v = _xi_rk4(c.t, c.edot_right, c.edot_left, c.damping_right, c.damping_left,
                    c.source_right, c.source_left)
    return XiResult(kernels.grid.steps, xi, "phi-alpha-ode", c.edot_left[::2] * v)


def xi_formal_solution(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                       kernels: DecayKernels | None = None, steps: int = 2000) -> XiResult:
    """Nested-quadrature form of the xi equation's solution with zero initial data."""
    _require_equilibrium_start(ensemble, protocol)
    kernels = _kernels(protocol, bath, kernels, steps)
    c = xi_coefficients(ensemble, protocol, bath, kernels)
    inner = relaxed_cumulative(c.t, pair_cumulative(c.t, c.damping_right, c.damping_left),
                               c.source_right, c.source_left)
    xi = pair_cumulative(c.t, c.edot_right * inner, c.edot_left * inner)
    return XiResult(kernels.grid.steps, xi[::2], "formal-solution")


def jensen_bound(xi: XiResult, beta: float, cap: float = BOUND_CAP):
    """-ln(1 - xi) / beta with an overflow flag where xi is too close to 1."""
    x = np.asarray(xi.xi, dtype=float)
    if np.any(x > 1.0):
        raise XiRangeError("bound undefined for xi > 1")
    with np.errstate(divide="ignore"):
        b = -np.log1p(-x) / beta
    overflow = ~np.isfinite(b) | (b > cap)
    return np.where(overflow, cap, b), overflow


def relaxed_cumulative(t: np.ndarray, L: np.ndarray, f_right: np.ndarray,
                       f_left: np.ndarray | None = None) -> np.ndarray:
    """int_0^t exp(-(L(t) - L(s))) f(s) ds on a fine grid, step by step.

    Each step restarts from the previous step node so exponents stay bounded.
    """
    f_left = f_right if f_left is None else f_left
    out = np.zeros_like(t)
    acc = 0.0
    for i in range(0, t.size - 2, 2):
        a, m, b = i, i + 1, i + 2
        h = 0.5 * (t[b] - t[a])
        ga_m = np.exp(L[a] - L[m]) * f_right[a]
        gb_m = np.exp(L[b] - L[m]) * f_left[b]
        out[m] = np.exp(L[a] - L[m]) * acc + h / 12 * (5 * ga_m + 8 * f_right[m] - gb_m)
        ga = np.exp(L[a] - L[b]) * f_right[a]
        gm = np.exp(L[m] - L[b]) * f_right[m]
        acc = np.exp(L[a] - L[b]) * acc + h / 3 * (ga + 4 * gm + f_left[b])
        out[b] = acc
    return out


@dataclass(frozen=True)
class VarianceParts:
    t: np.ndarray
    classical: np.ndarray
    coherence: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.classical - self.coherence


def variance_closed_form(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                         grid: TimeGrid | None = None, steps: int = 2000) -> VarianceParts:
    """Work variance as classical part minus the coherence double integral.

    classical(tau) = 2 int Edot {mu1(t) - int_0^t e^{-int_s^t Lambda} r_down(s) mu1(s) ds} dt
                     - mu1(tau)^2
    coherence(tau) = 2 int Edot_t int_0^t Edot_s abar(s) e^{-int_s^t Lambda} ds dt
    with Lambda = r_down + r_up.  mu1 comes from the n = 1 hierarchy on the refined
    grid so that its values are available on every Simpson node.
    """
    grid = build_grid(protocol, bath, steps) if grid is None else grid
    kernels = decay_kernels(protocol, bath, grid)
    s = kernels.samples
    mu1 = solve_moment_hierarchy(ensemble, protocol, bath, 1, grid=grid.refined()).mean
    abar = ensemble_null_segment(ensemble, kernels).mean_coherence()
    L = pair_cumulative(s.t, s.relax)
    relaxed_mean = relaxed_cumulative(s.t, L, s.down * mu1)
    classical = 2 * pair_cumulative(s.t, s.rate_right * (mu1 - relaxed_mean),
                                    s.rate_left * (mu1 - relaxed_mean)) - mu1 ** 2
    inner = relaxed_cumulative(s.t, L, s.rate_right * abar, s.rate_left * abar)
    coherence = 2 * pair_cumulative(s.t, s.rate_right * inner, s.rate_left * inner)
    return VarianceParts(grid.steps, classical[::2], coherence[::2])


def relaxation_time(E, bath: BathSpec):
    """lambda = (1 - 2 p_eq(E)) / gamma(E); zero at E = 0."""
    E = np.asarray(E, dtype=float)
    num = np.tanh(0.5 * bath.beta * E)
    if bath.coupling == "constant":
        return num / bath.strength
    # tanh(beta E / 2) / (kappa E) -> beta / (2 kappa) as E -> 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = num / (bath.strength * E)
    return np.where(E > 1e-12, val, bath.beta / (2 * bath.strength))


def end_derivative(t: np.ndarray, y: np.ndarray, points: int = 5) -> float:
    """One-sided finite-difference derivative at t[-1] from the last ``points`` nodes."""
    tt = t[-points:] - t[-1]
    scale = np.max(np.abs(tt))
    x = tt / scale
    V = np.vander(x, points, increasing=True).T
    rhs = np.zeros(points)
    rhs[1] = 1.0
    w = np.linalg.solve(V, rhs)
    return float(w @ y[-points:] / scale)


def stencil_derivative(t: np.ndarray, y: np.ndarray, points: int = 5) -> np.ndarray:
    """Derivative at every node using ``points``-node Lagrange stencils (one-sided at ends)."""
    out = np.empty_like(y)
    half = points // 2
    for i in range(t.size):
        lo = min(max(i - half, 0), t.size - points)
        tt = t[lo:lo + points] - t[i]
        scale = np.max(np.abs(tt))
        V = np.vander(tt / scale, points, increasing=True).T
        rhs = np.zeros(points)
        rhs[1] = 1.0
        out[i] = np.linalg.solve(V, rhs) @ y[lo:lo + points] / scale
    return out


@dataclass(frozen=True)
class FdrPoint:
    tau: float
    variance_rate: float
    dissipation_rate: float
    classical_deviation: float
    predicted_correction: float
    relaxation_time: float
    mean_coherence: float

    @property
    def ratio(self) -> float:
        return self.classical_deviation / self.predicted_correction


@dataclass(frozen=True)
class FdrReport:
    ensemble: str
    points: list[FdrPoint]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])


def fdr_point(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
              steps: int = 2000) -> FdrPoint:
    grid = build_grid(protocol, bath, steps)
    kernels = decay_kernels(protocol, bath, grid)
    ms = solve_moment_hierarchy(ensemble, protocol, bath, 2, kernels=kernels)
    t = ms.t
    beta = bath.beta
    var_rate = end_derivative(t, ms.variance)
    wdiss = ms.mean - free_energy_change(protocol, beta, t)
    diss_rate = end_derivative(t, wdiss)
    tau = protocol.tau
    E = float(protocol.energy(tau))
    edot = float(protocol.energy_rate(tau, side=-1))
    abar = float(ms.segment.mean_coherence()[-1])
    lam = float(relaxation_time(E, bath))
    return FdrPoint(tau, var_rate, diss_rate, var_rate - 2.0 / beta * diss_rate,
                    -2.0 * abar * lam * edot ** 2, lam, abar)


def fdr_scan(ensemble: EnsembleSpec, family: Callable[[float], DriveProtocol], bath: BathSpec,
             taus: Sequence[float], steps: int = 2000) -> FdrReport:
    return FdrReport(ensemble.name, [fdr_point(ensemble, family(float(tau)), bath, steps)
                                     for tau in taus])


@dataclass(frozen=True)
class CumulantRates:
    t: np.ndarray
    kappa3_rate: np.ndarray
    kappa4_rate: np.ndarray


def slow_cumulant_rates(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                        grid: TimeGrid | None = None, steps: int = 2000) -> CumulantRates:
    """Slow-driving rates of the third and fourth cumulants.

    a_n = n <g|C_(n-1)|g> lambda Edot, kappa3' = 3 mu1 a2 - a3,
    kappa4' = 6 mu2 a2 - a4 - 12 mu1^2 a2 + 4 mu1 a3.
    """
    grid = build_grid(protocol, bath, steps) if grid is None else grid
    kernels = decay_kernels(protocol, bath, grid)
    ms = solve_moment_hierarchy(ensemble, protocol, bath, 2, kernels=kernels)
    s = kernels.samples
    t = s.t[::2]
    edot = s.rate_right[::2]
    lam = relaxation_time(s.energy[::2], bath)

    def a(n):
        # <g|C_(n-1)|g> = (n - 1) Edot * sum_i w_i W_i^(n-2) a_i
        return n * ms.segment.moment_source(n - 1)[::2] * edot * lam * edot

    mu1, mu2 = ms.moments[:, 1], ms.moments[:, 2]
    a2, a3, a4 = a(2), a(3), a(4)
    k3 = 3 * mu1 * a2 - a3
    k4 = 6 * mu2 * a2 - a4 - 12 * mu1 ** 2 * a2 + 4 * mu1 * a3
    return CumulantRates(t, k3, k4)


@dataclass(frozen=True)
class XiConsistency:
    t: np.ndarray
    log_rate: np.ndarray       # -d/dtau ln(1 - xi)
    prediction: np.ndarray     # beta^2 abar lambda Edot^2
    in_regime: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.log_rate / self.prediction


def xi_cumulant_consistency(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                            steps: int = 4000, regime_time: float | None = None
                            ) -> XiConsistency:
    """Compare -d ln(1 - xi)/d tau with beta^2 abar lambda Edot^2 along one run.

    Points earlier than ``regime_time`` (default: five relaxation times at the end
    gap) are flagged as outside the slow-driving regime.
    """
    kernels = _kernels(protocol, bath, None, steps)
    xi = xi_from_ode(ensemble, protocol, bath, kernels=kernels)
    t = xi.t
    s = kernels.samples
    log_rate = xi.rate / (1.0 - xi.xi)
    abar = ensemble_null_segment(ensemble, kernels).mean_coherence()[::2]
    E = s.energy[::2]
    lam = relaxation_time(E, bath)
    pred = bath.beta ** 2 * abar * lam * s.rate_right[::2] ** 2
    if regime_time is None:
        regime_time = 5.0 / float(coupling_rate(max(float(E[-1]), 1e-12), bath))
    return XiConsistency(t, log_rate, pred, t >= regime_time)
