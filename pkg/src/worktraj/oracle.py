"""Exact work MGF of the discrete stroboscopic process by brute-force path enumeration.

This module shares no numerics with the ODE or Monte Carlo code paths.  A step
``n`` covers ``[t_n, t_(n+1)]``: the jump/no-jump event is resolved first, using
survival factors ``a_n = exp(-int r_down)`` and ``b_n = exp(-int r_up)``, and the
work of the step is ``p_e(after event) * (E_(n+1) - E_n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .model import BathSpec, DriveProtocol, EnsembleSpec, rates

MAX_STEPS = 16


@dataclass(frozen=True)
class DiscreteModel:
    energies: np.ndarray      # E(t_0) ... E(t_N)
    stay_excited: np.ndarray  # a_n, n = 0 .. N-1
    stay_ground: np.ndarray   # b_n
    dt: float

    def __post_init__(self) -> None:
        n = self.stay_excited.size
        if n > MAX_STEPS:
            raise ValueError(f"N = {n} exceeds the enumeration guard of {MAX_STEPS}")
        if self.energies.size != n + 1 or self.stay_ground.size != n:
            raise ValueError("inconsistent step arrays")
        for arr in (self.stay_excited, self.stay_ground):
            if np.any(arr <= 0) or np.any(arr > 1):
                raise ValueError("survival factors must lie in (0, 1]")

    @property
    def n_steps(self) -> int:
        return self.stay_excited.size

    @property
    def q_down(self) -> np.ndarray:
        return 1.0 - self.stay_excited

    @property
    def q_up(self) -> np.ndarray:
        return 1.0 - self.stay_ground


def step_survival(protocol: DriveProtocol, bath: BathSpec, times: np.ndarray):
    """Per-step survival factors ``exp(-int r)`` by adaptive quadrature on each step."""
    def integral(which, a, b):
        f = lambda t: float(rates(protocol.energy(t), bath)[which])  # noqa: E731
        return integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    down = np.array([integral(0, a, b) for a, b in zip(times[:-1], times[1:])])
    up = np.array([integral(1, a, b) for a, b in zip(times[:-1], times[1:])])
    return np.exp(-down), np.exp(-up)


def discretize(protocol: DriveProtocol, bath: BathSpec, n_steps: int) -> DiscreteModel:
    times = np.linspace(0.0, protocol.tau, n_steps + 1)
    a, b = step_survival(protocol, bath, times)
    return DiscreteModel(protocol.energy(times), a, b, protocol.tau / n_steps)


def _bit_paths(m: int) -> np.ndarray:
    """All 2^m state sequences as rows; 1 = excited."""
    if m == 0:
        return np.zeros((1, 0), dtype=np.int8)
    idx = np.arange(2 ** m)[:, None]
    return ((idx >> np.arange(m)[None, :]) & 1).astype(np.int8)


def _prep_mgf_enumerated(p_e: float, model: DiscreteModel, u: float) -> float:
    N = model.n_steps
    dE = np.diff(model.energies)
    a, b = model.stay_excited, model.stay_ground
    total = 0.0
    weight = 1.0       # probability of k consecutive null events
    work = 0.0         # work accumulated along the null run
    p = p_e
    for k in range(N + 1):
        if k == N:
            total += weight * np.exp(-u * work)
            break
        # first jump at step k, to g (state 0) or to e (state 1)
        for first, prob in ((0, p * (1 - a[k])), (1, (1 - p) * (1 - b[k]))):
            if prob == 0.0:
                continue
            paths = _bit_paths(N - k - 1)
            states = np.concatenate([np.full((paths.shape[0], 1), first, dtype=np.int8),
                                     paths], axis=1)
            prev = states[:, :-1]
            nxt = states[:, 1:]
            ak, bk = a[k + 1:], b[k + 1:]
            trans = np.where(prev == 1, np.where(nxt == 1, ak, 1 - ak),
                             np.where(nxt == 1, 1 - bk, bk))
            path_prob = prob * weight * np.prod(trans, axis=1)
            path_work = work + states @ dE[k:]
            total += float(np.sum(path_prob * np.exp(-u * path_work)))
        stay = p * a[k] + (1 - p) * b[k]
        weight *= stay
        p = p * a[k] / stay if stay > 0 else p
        work += p * dE[k]
    return total


def enumerate_mgf(ensemble: EnsembleSpec, model: DiscreteModel, u: float) -> float:
    """Sum of P[path] exp(-u W[path]) over every outcome sequence."""
    p, w = ensemble.quadrature()
    return float(sum(wi * _prep_mgf_enumerated(pi, model, u) for pi, wi in zip(p, w)))


def _tilted_transfer(model: DiscreteModel, u: float):
    """Per-step matrices mapping (e, g) weights before the event to tilted weights after."""
    dE = np.diff(model.energies)
    a, b = model.stay_excited, model.stay_ground
    mats = np.zeros((model.n_steps, 2, 2))
    mats[:, 0, 0] = a
    mats[:, 0, 1] = 1 - b
    mats[:, 1, 0] = 1 - a
    mats[:, 1, 1] = b
    mats[:, 0, :] *= np.exp(-u * dE)[:, None]
    return mats


def matrix_product_mgf(ensemble: EnsembleSpec, model: DiscreteModel, u: float) -> float:
    """Same quantity as :func:`enumerate_mgf` via products of tilted 2x2 matrices.

    The post-jump part is a backward product ``ones @ M_(N-1) ... M_(k+1)``; the
    null run supplies the weight and tilt of each first-jump time.
    """
    N = model.n_steps
    dE = np.diff(model.energies)
    a, b = model.stay_excited, model.stay_ground
    mats = _tilted_transfer(model, u)
    tails = np.empty((N + 1, 2))
    tails[N] = 1.0
    for j in range(N - 1, -1, -1):
        tails[j] = tails[j + 1] @ mats[j]
    p_arr, w_arr = ensemble.quadrature()
    total = 0.0
    for p_e, w in zip(p_arr, w_arr):
        log_weight = 0.0
        tilt = 1.0
        p = p_e
        acc = 0.0
        for k in range(N):
            jump = np.array([(1 - p) * (1 - b[k]) * np.exp(-u * dE[k]), p * (1 - a[k])])
            acc += np.exp(log_weight) * tilt * float(tails[k + 1] @ jump)
            stay = p * a[k] + (1 - p) * b[k]
            log_weight += np.log(stay)
            p = p * a[k] / stay
            tilt *= np.exp(-u * p * dE[k])
        acc += np.exp(log_weight) * tilt
        total += w * acc
    return float(total)


def random_model(rng: np.random.Generator, n_steps: int | None = None) -> DiscreteModel:
    n = int(rng.integers(1, 11)) if n_steps is None else n_steps
    energies = np.concatenate([[rng.uniform(0, 1)], rng.uniform(0, 1, n)]).cumsum()
    return DiscreteModel(energies, rng.uniform(0.3, 0.999, n), rng.uniform(0.3, 0.999, n),
                         float(rng.uniform(0.01, 0.2)))
