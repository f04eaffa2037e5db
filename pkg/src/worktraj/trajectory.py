"""Stroboscopic quantum-jump Monte Carlo with per-trajectory work and heat.

A step covers ``[t_n, t_(n+1)]``.  The Kraus event is resolved at ``t_n`` with
jump probabilities ``p_e (1 - a_n)`` (emission) and ``p_g (1 - b_n)`` (absorption),
where ``a_n``, ``b_n`` are the exponential survival factors of the step.  A null
event rescales the populations by the same factors.  The work of the step is
``p_e(after event) * (E_(n+1) - E_n)`` and the heat of the event is the change in
``p_e * E(t_n)`` it causes.

Random numbers come from a counter-based hash of (seed, trajectory index, step),
so every trajectory is reproducible on its own, independent of batching.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import BathSpec, DriveProtocol, EnsembleSpec, rates

JUMP_LIMIT = 0.1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True)
def _mix(x):
    x = (x ^ (x >> _S30)) * _M1
    x = (x ^ (x >> _S27)) * _M2
    return x ^ (x >> _S31)


@numba.njit(cache=True)
def _stream_key(seed, index):
    return _mix(_mix(np.uint64(seed)) ^ (np.uint64(index) * _GOLDEN + _GOLDEN))


@numba.njit(cache=True)
def _uniform(key, counter):
    z = _mix(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return np.float64(z >> _S11) * _INV53


@numba.njit(cache=True)
def _counter_uniforms(seed, start, count, counter):
    out = np.empty(count)
    for i in range(count):
        out[i] = _uniform(_stream_key(seed, start + i), counter)
    return out


def counter_uniforms(seed: int, indices, counter: int) -> np.ndarray:
    """Uniforms on [0, 1) for consecutive trajectory indices at one counter value."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.empty(0)
    return _counter_uniforms(np.uint64(seed), np.int64(idx[0]), idx.size, np.int64(counter))


PREP_COUNTER = 0


@dataclass(frozen=True)
class StepTable:
    """Per-step data shared by every trajectory of a run."""

    times: np.ndarray
    energies: np.ndarray
    stay_excited: np.ndarray
    stay_ground: np.ndarray


def step_table(protocol: DriveProtocol, bath: BathSpec, dt: float,
               limit: float = JUMP_LIMIT) -> StepTable:
    """Uniform steps of size ``dt``, halved where ``max rate * step`` would exceed ``limit``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(round(protocol.tau / dt)))
    coarse = np.linspace(0.0, protocol.tau, n + 1)
    pieces = [coarse[:1]]
    for t0, t1 in zip(coarse[:-1], coarse[1:]):
        sub = np.array([t0, t1])
        for _ in range(60):
            mids = 0.5 * (sub[:-1] + sub[1:])
            probe = np.concatenate([sub, mids])
            d, _u = rates(protocol.energy(probe), bath)
            peak = max(float(np.max(d)), float(np.max(_u)))
            if peak * float(np.max(np.diff(sub))) < limit:
                break
            sub = np.sort(np.concatenate([sub, mids]))
        pieces.append(sub[1:])
    times = np.concatenate(pieces)
    t0, t1 = times[:-1], times[1:]
    tm = 0.5 * (t0 + t1)
    d0, u0 = rates(protocol.energy(t0), bath)
    dm, um = rates(protocol.energy(tm), bath)
    d1, u1 = rates(protocol.energy(t1), bath)
    h = t1 - t0
    a = np.exp(-h / 6 * (d0 + 4 * dm + d1))
    b = np.exp(-h / 6 * (u0 + 4 * um + u1))
    return StepTable(times, protocol.energy(times), a, b)


@numba.njit(cache=True)
def _advance(p, u, a, b, e_now, e_next):
    """One Kraus step; returns (p_after, event, work, heat). event: 0 null, 1 to g, 2 to e."""
    p_down = p * (1.0 - a)
    p_up = (1.0 - p) * (1.0 - b)
    if u < p_down:
        heat = -p * e_now
        p_new = 0.0
        event = 1
    elif u < p_down + p_up:
        heat = (1.0 - p) * e_now
        p_new = 1.0
        event = 2
    else:
        if p == 0.0 or p == 1.0:
            p_new = p
        else:
            num = p * a
            p_new = num / (num + (1.0 - p) * b)
        heat = (p_new - p) * e_now
        event = 0
    return p_new, event, p_new * (e_next - e_now), heat


@numba.njit(cache=True)
def _run_many(seed, start, p0, energies, a, b, work, heat, p_final, first_step, p_first,
              n_jumps):
    n_steps = a.shape[0]
    for i in range(p0.shape[0]):
        key = _stream_key(seed, start + i)
        p = p0[i]
        w = 0.0
        q = 0.0
        first = -1
        pf = -1.0
        jumps = 0
        for n in range(n_steps):
            u = _uniform(key, n + 1)
            before = p
            p, event, dw, dq = _advance(p, u, a[n], b[n], energies[n], energies[n + 1])
            w += dw
            q += dq
            if event != 0:
                jumps += 1
                if first < 0:
                    first = n
                    pf = before
        work[i] = w
        heat[i] = q
        p_final[i] = p
        first_step[i] = first
        p_first[i] = pf
        n_jumps[i] = jumps


@dataclass
class TrajectoryRecord:
    p_e: float
    first_jump_time: float | None
    events: list = field(default_factory=list)  # (time, "jump_g" | "jump_e", W, Q)
    work: float = 0.0
    heat: float = 0.0
    final_p_e: float = 0.0
    seed: int = 0
    index: int = 0

    @property
    def final_state(self) -> str:
        if self.final_p_e == 0.0:
            return "g"
        if self.final_p_e == 1.0:
            return "e"
        return f"superposition({self.final_p_e:.6g})"


def step(p_e: float, t: float, dt: float, protocol: DriveProtocol, bath: BathSpec,
         uniform: float):
    """Single Kraus step of size ``dt`` from time ``t``: ``(p_e', event, dW, dQ)``."""
    d, u = rates(protocol.energy(np.array([t, t + 0.5 * dt, t + dt])), bath)
    if (d.max() * p_e + u.max() * (1 - p_e)) * dt >= JUMP_LIMIT:
        raise ValueError("dt too large: expected jump count per step must stay below 0.1")
    a = float(np.exp(-dt / 6 * (d[0] + 4 * d[1] + d[2])))
    b = float(np.exp(-dt / 6 * (u[0] + 4 * u[1] + u[2])))
    e0, e1 = float(protocol.energy(t)), float(protocol.energy(t + dt))
    p, event, dw, dq = _advance(float(p_e), float(uniform), a, b, e0, e1)
    return p, ("null", "jump_g", "jump_e")[event], dw, dq


def simulate_trajectory(p_e: float, protocol: DriveProtocol, bath: BathSpec, dt: float,
                        seed: int, index: int = 0, table: StepTable | None = None
                        ) -> TrajectoryRecord:
    """One trajectory, identical to trajectory ``index`` of a batch with the same seed."""
    table = step_table(protocol, bath, dt) if table is None else table
    # keep the key unsigned: a plain int would be retyped as int64 on the next call
    key = np.uint64(_stream_key(np.uint64(seed), np.int64(index)))
    rec = TrajectoryRecord(p_e=float(p_e), first_jump_time=None, seed=seed, index=index)
    p = float(p_e)
    for n in range(table.stay_excited.size):
        u = _uniform(key, n + 1)
        p, event, dw, dq = _advance(p, u, table.stay_excited[n], table.stay_ground[n],
                                    table.energies[n], table.energies[n + 1])
        rec.work += dw
        rec.heat += dq
        if event:
            name = "jump_g" if event == 1 else "jump_e"
            if rec.first_jump_time is None:
                rec.first_jump_time = float(table.times[n])
            rec.events.append((float(table.times[n]), name, rec.work - dw, rec.heat))
    rec.final_p_e = p
    return rec


# --- streaming statistics -------------------------------------------------

@dataclass(frozen=True)
class MomentSums:
    """Count, mean and central sums M2..M4; merges associatively."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    m3: float = 0.0
    m4: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "MomentSums":
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        d = x - mu
        d2 = d * d
        return cls(x.size, mu, float(d2.sum()), float((d2 * d).sum()), float((d2 * d2).sum()))

    def merge(self, other: "MomentSums") -> "MomentSums":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        dn = delta / n
        mean = self.mean + nb * dn
        m2 = self.m2 + other.m2 + delta * dn * na * nb
        m3 = (self.m3 + other.m3 + delta * dn * dn * na * nb * (na - nb)
              + 3.0 * dn * (na * other.m2 - nb * self.m2))
        m4 = (self.m4 + other.m4
              + delta * dn ** 3 * na * nb * (na * na - na * nb + nb * nb)
              + 6.0 * dn * dn * (na * na * other.m2 + nb * nb * self.m2)
              + 4.0 * dn * (na * other.m3 - nb * self.m3))
        return MomentSums(n, mean, m2, m3, m4)

    @property
    def variance(self) -> float:
        return self.m2 / self.n if self.n else 0.0

    def central(self) -> tuple[float, float, float]:
        return self.m2 / self.n, self.m3 / self.n, self.m4 / self.n


def merge_all(parts) -> MomentSums:
    acc = MomentSums()
    for p in parts:
        acc = acc.merge(p)
    return acc


@dataclass(frozen=True)
class WorkStatistics:
    count: int
    mean: float
    variance: float
    central3: float
    central4: float
    se_mean: float
    se_variance: float
    single_sample: bool = False
    se_central3: float = 0.0

    @property
    def cumulants(self) -> tuple[float, float, float, float]:
        return (self.mean, self.variance, self.central3,
                self.central4 - 3.0 * self.variance ** 2)

    @property
    def skewness(self) -> float:
        return self.central3 / self.variance ** 1.5 if self.variance > 0 else 0.0


def statistics_from_batches(parts: list[MomentSums]) -> WorkStatistics:
    total = merge_all(parts)
    if total.n == 0:
        raise ValueError("no samples")
    c2, c3, c4 = total.central()
    if total.n == 1:
        return WorkStatistics(1, total.mean, 0.0, 0.0, 0.0, 0.0, 0.0, single_sample=True)
    parts = [p for p in parts if p.n > 0]
    B = len(parts)

    def spread(x):
        return float(np.sqrt((B - 1) / B * np.sum((x - x.mean()) ** 2)))

    if B >= 2:
        prefix = [MomentSums()]
        for p in parts:
            prefix.append(prefix[-1].merge(p))
        suffix = [MomentSums()]
        for p in reversed(parts):
            suffix.append(suffix[-1].merge(p))
        suffix = suffix[::-1]
        loo = [prefix[i].merge(suffix[i + 1]) for i in range(B)]
        se_mean = spread(np.array([s.mean for s in loo]))
        se_var = spread(np.array([s.variance for s in loo]))
        se_c3 = spread(np.array([s.central()[1] for s in loo]))
    else:
        n = total.n
        se_mean = float(np.sqrt(c2 / (n - 1)))
        se_var = float(np.sqrt(max(c4 - c2 * c2 * (n - 3) / (n - 1), 0.0) / n))
        se_c3 = float("nan")
    return WorkStatistics(total.n, total.mean, c2, c3, c4, se_mean, se_var, se_central3=se_c3)


@dataclass(frozen=True)
class BatchResult:
    stats: WorkStatistics
    heat_stats: WorkStatistics
    work: np.ndarray
    heat: np.ndarray
    p_initial: np.ndarray
    p_final: np.ndarray
    first_jump_time: np.ndarray  # nan when no jump happened
    p_before_first_jump: np.ndarray
    n_jumps: np.ndarray
    table: StepTable

    def mgf(self, u: float) -> tuple[float, float]:
        """Sample mean of exp(-u W) with its standard error."""
        x = np.exp(-u * self.work)
        return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def batch_bounds(n_traj: int, n_batches: int = 64) -> list[tuple[int, int]]:
    """Fixed partition of trajectory indices; depends only on ``n_traj``."""
    k = min(n_batches, n_traj)
    edges = np.linspace(0, n_traj, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def run_batch(ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec, dt: float,
              n_traj: int, seed: int, table: StepTable | None = None) -> BatchResult:
    """Simulate ``n_traj`` trajectories and accumulate work statistics."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    table = step_table(protocol, bath, dt) if table is None else table
    seed_u = np.uint64(seed)
    idx = np.arange(n_traj, dtype=np.int64)
    p0 = ensemble.sample(counter_uniforms(seed, idx, PREP_COUNTER))
    p0 = np.ascontiguousarray(p0, dtype=float)
    work = np.empty(n_traj)
    heat = np.empty(n_traj)
    p_final = np.empty(n_traj)
    first = np.empty(n_traj, dtype=np.int64)
    p_first = np.empty(n_traj)
    n_jumps = np.empty(n_traj, dtype=np.int64)
    _run_many(seed_u, np.int64(0), p0, table.energies, table.stay_excited, table.stay_ground,
              work, heat, p_final, first, p_first, n_jumps)
    bounds = batch_bounds(n_traj)
    stats = statistics_from_batches([MomentSums.of(work[a:b]) for a, b in bounds])
    heat_stats = statistics_from_batches([MomentSums.of(heat[a:b]) for a, b in bounds])
    first_time = np.where(first >= 0, table.times[np.maximum(first, 0)], np.nan)
    return BatchResult(stats, heat_stats, work, heat, p0, p_final, first_time, p_first,
                       n_jumps, table)


def write_event_dump(path, ensemble: EnsembleSpec, protocol: DriveProtocol, bath: BathSpec,
                     dt: float, n_traj: int, seed: int) -> None:
    """One CSV row per jump: trajectory_id, t, event, W_so_far, Q_so_far."""
    table = step_table(protocol, bath, dt)
    p0 = ensemble.sample(counter_uniforms(seed, np.arange(n_traj), PREP_COUNTER))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "t", "event", "W_so_far", "Q_so_far"])
        for i in range(n_traj):
            rec = simulate_trajectory(p0[i], protocol, bath, dt, seed, i, table)
            for t, name, w, q in rec.events:
                writer.writerow([i, repr(t), name, repr(w), repr(q)])
