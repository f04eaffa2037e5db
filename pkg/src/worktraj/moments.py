"""Work moments and the work MGF from the matrix ODEs, integrated with fixed-grid RK4.

The 2x2 matrices use (e, g) ordering.  ``G_n`` are the expansion coefficients of the
matrix MGF, ``G(u) = sum_n (-u)^n / n! G_n``, so the sum of entries of ``G_n`` is the
n-th raw moment of the work.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numba
import numpy as np

from .kernels import (DecayKernels, NullSegment, ResolutionError, TimeGrid, build_grid,
                      decay_kernels, ensemble_null_segment)
from .model import BathSpec, DriveProtocol, EnsembleSpec

MAX_ORDER = 4


@numba.njit(cache=True)
def _hierarchy_rhs(G, d, u, edot, src, out):
    n_max = G.shape[0] - 1
    for n in range(n_max + 1):
        for c in range(2):
            flow = -d * G[n, 0, c] + u * G[n, 1, c]
            out[n, 0, c] = flow
            out[n, 1, c] = -flow
            if n > 0:
                out[n, 0, c] += n * edot * G[n - 1, 0, c]
        out[n, 0, 0] -= edot * src[n]
        out[n, 1, 1] += edot * src[n]


@numba.njit(cache=True)
def _hierarchy_rk4(down, up, rate_r, rate_l, t, src, G0):
    n_steps = (t.shape[0] - 1) // 2
    n1 = G0.shape[0]
    out = np.empty((n_steps + 1, n1, 2, 2))
    out[0] = G0
    G = G0.copy()
    k1 = np.empty_like(G)
    k2 = np.empty_like(G)
    k3 = np.empty_like(G)
    k4 = np.empty_like(G)
    for i in range(n_steps):
        a, m, b = 2 * i, 2 * i + 1, 2 * i + 2
        h = t[b] - t[a]
        _hierarchy_rhs(G, down[a], up[a], rate_r[a], src[:, a], k1)
        _hierarchy_rhs(G + 0.5 * h * k1, down[m], up[m], rate_r[m], src[:, m], k2)
        _hierarchy_rhs(G + 0.5 * h * k2, down[m], up[m], rate_r[m], src[:, m], k3)
        _hierarchy_rhs(G + h * k3, down[b], up[b], rate_l[b], src[:, b], k4)
        G = G + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = G
    return out


@numba.njit(cache=True)
def _mgf_rhs(G, d, u, edot, tilt, src, out):
    for c in range(2):
        flow = -d * G[0, c] + u * G[1, c]
        out[0, c] = flow - tilt * edot * G[0, c]
        out[1, c] = -flow
    out[0, 0] += tilt * edot * src
    out[1, 1] -= tilt * edot * src


@numba.njit(cache=True)
def _mgf_rk4(down, up, rate_r, rate_l, t, tilt, src, G0):
    n_steps = (t.shape[0] - 1) // 2
    out = np.empty((n_steps + 1, 2, 2))
    out[0] = G0
    G = G0.copy()
    k1 = np.empty_like(G)
    k2 = np.empty_like(G)
    k3 = np.empty_like(G)
    k4 = np.empty_like(G)
    for i in range(n_steps):
        a, m, b = 2 * i, 2 * i + 1, 2 * i + 2
        h = t[b] - t[a]
        _mgf_rhs(G, down[a], up[a], rate_r[a], tilt, src[a], k1)
        _mgf_rhs(G + 0.5 * h * k1, down[m], up[m], rate_r[m], tilt, src[m], k2)
        _mgf_rhs(G + 0.5 * h * k2, down[m], up[m], rate_r[m], tilt, src[m], k3)
        _mgf_rhs(G + h * k3, down[b], up[b], rate_l[b], tilt, src[b], k4)
        G = G + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = G
    return out


def cumulants_from_moments(mu) -> np.ndarray:
    """Raw moments ``mu[..., k-1] = <W^k>`` to cumulants ``kappa[..., k-1]`` (k <= 4)."""
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[-1]
    if n > MAX_ORDER:
        raise ValueError("orders above 4 are not supported")
    kappa = np.empty_like(mu)
    for m in range(1, n + 1):
        acc = mu[..., m - 1].copy()
        for l in range(1, m):
            acc = acc - comb(m - 1, l - 1) * kappa[..., l - 1] * mu[..., m - l - 1]
        kappa[..., m - 1] = acc
    return kappa


@dataclass(frozen=True)
class MomentSeries:
    t: np.ndarray
    G: np.ndarray
    segment: NullSegment

    @property
    def n_max(self) -> int:
        return self.G.shape[1] - 1

    @property
    def moments(self) -> np.ndarray:
        """Raw moments, ``moments[:, n]`` = <W^n> (column 0 is the normalisation)."""
        return self.G.sum(axis=(-1, -2))

    @property
    def cumulants(self) -> np.ndarray:
        """``cumulants[:, k-1]`` = kappa_k for k = 1..n_max."""
        return cumulants_from_moments(self.moments[:, 1:])

    @property
    def mean(self) -> np.ndarray:
        return self.moments[:, 1]

    @property
    def variance(self) -> np.ndarray:
        m = self.moments
        return m[:, 2] - m[:, 1] ** 2

    def at_end(self) -> np.ndarray:
        return self.moments[-1]


@dataclass(frozen=True)
class MgfSeries:
    t: np.ndarray
    u: np.ndarray
    G: np.ndarray  # shape (len(u), n_t, 2, 2)

    @property
    def value(self) -> np.ndarray:
        return self.G.sum(axis=(-1, -2))


def _prepare(ensemble, protocol, bath, grid, kernels, steps):
    if kernels is None:
        grid = build_grid(protocol, bath, steps) if grid is None else grid
        kernels = decay_kernels(protocol, bath, grid)
    return kernels, ensemble_null_segment(ensemble, kernels)


def initial_matrix(ensemble: EnsembleSpec) -> np.ndarray:
    pe = ensemble.mean_excited()
    return np.diag([pe, 1.0 - pe])


def solve_moment_hierarchy(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                           n_max: int = 4, grid: TimeGrid | None = None,
                           kernels: DecayKernels | None = None, steps: int = 2000,
                           check: bool = False, tol: float = 1e-6) -> MomentSeries:
    """Integrate dG_n/dt = -R G_n + n Hdot G_(n-1) + C_n for n = 0..n_max."""
    if not 1 <= n_max <= MAX_ORDER:
        raise ValueError("n_max must lie in 1..4")
    kernels, seg = _prepare(ensemble, protocol, bath, grid, kernels, steps)
    s = kernels.samples
    src = np.stack([seg.moment_source(n) for n in range(n_max + 1)])
    G0 = np.zeros((n_max + 1, 2, 2))
    G0[0] = initial_matrix(ensemble)
    G = _hierarchy_rk4(s.down, s.up, s.rate_right, s.rate_left, s.t, src, G0)
    series = MomentSeries(kernels.grid.steps, G, seg)
    if check:
        finer = solve_moment_hierarchy(ensemble, protocol, bath, n_max,
                                       grid=kernels.grid.refined())
        defect = float(np.max(np.abs(finer.moments[::2] - series.moments)))
        if defect > tol:
            raise ResolutionError(f"step halving moved the moments by {defect:.3g}")
    return series


def solve_mgf(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec, u_list,
              grid: TimeGrid | None = None, kernels: DecayKernels | None = None,
              steps: int = 2000) -> MgfSeries:
    """Integrate dG/dt = (-u Hdot - R) G + C_null(u, t) for each u."""
    kernels, seg = _prepare(ensemble, protocol, bath, grid, kernels, steps)
    s = kernels.samples
    u_arr = np.atleast_1d(np.asarray(u_list, dtype=float))
    if not np.all(np.isfinite(u_arr)):
        raise ValueError("u must be finite")
    G0 = initial_matrix(ensemble)
    out = np.stack([_mgf_rk4(s.down, s.up, s.rate_right, s.rate_left, s.t, float(u),
                             seg.mgf_source(float(u)), G0) for u in u_arr])
    return MgfSeries(kernels.grid.steps, u_arr, out)


def mgf_mean_by_difference(ensemble, protocol, bath, du: float = 1e-4, **kw) -> np.ndarray:
    """-dG/du at u = 0 by central difference, for consistency checks against the hierarchy."""
    m = solve_mgf(ensemble, protocol, bath, [-du, du], **kw).value
    return -(m[1] - m[0]) / (2 * du)
