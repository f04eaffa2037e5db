"""Domain types and elementary thermodynamics of the driven two-level system.

Units: hbar = k_B = 1.  The Hamiltonian is ``E(t) |e><e|`` with ``E(t) >= 0``.
All 2x2 matrices in this package use the basis ordering (e, g), so index 0 is
the excited state and index 1 the ground state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

EXCITED = 0
GROUND = 1

PROTOCOL_KINDS = ("linear", "power", "tanh", "ramp", "piecewise")


@dataclass(frozen=True)
class DriveProtocol:
    """Energy-gap schedule on ``[0, tau]`` with analytic first and second derivatives.

    ``params`` depends on ``kind``:

    * linear: ``(slope,)``                E = slope * t
    * power: ``(scale, exponent)``        E = scale * t**exponent
    * tanh: ``(rate,)``                   E = tanh(rate * t)
    * ramp: ``(final_energy,)``           E = final_energy * t / tau
    * piecewise: knots given by ``knot_times`` and ``knot_energies``
    """

    kind: str
    params: tuple[float, ...]
    tau: float
    knot_times: tuple[float, ...] = ()
    knot_energies: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind == "power":
            scale, exponent = self.params
            if scale < 0 or exponent <= 0:
                raise ValueError("power protocol needs scale >= 0 and exponent > 0")
        elif self.kind in ("linear", "ramp"):
            if self.params[0] < 0:
                raise ValueError("drive must keep E >= 0")
        elif self.kind == "tanh":
            if self.params[0] < 0:
                raise ValueError("drive must keep E >= 0")
        elif self.kind == "piecewise":
            t = np.asarray(self.knot_times, dtype=float)
            e = np.asarray(self.knot_energies, dtype=float)
            if t.size < 2 or t.size != e.size:
                raise ValueError("piecewise protocol needs >= 2 matching knots")
            if np.any(np.diff(t) <= 0):
                raise ValueError("knot times must be strictly increasing")
            if abs(t[0]) > 1e-12 or abs(t[-1] - self.tau) > 1e-9 * self.tau:
                raise ValueError("knots must span [0, tau]")
            if np.any(e < 0):
                raise ValueError("drive must keep E >= 0")

    @property
    def singular_start(self) -> bool:
        """True when the drive rate diverges at t = 0 (fractional powers)."""
        return self.kind == "power" and self.params[1] < 1 and self.params[0] > 0

    def breakpoints(self) -> np.ndarray:
        """Interior times where the drive rate is discontinuous."""
        if self.kind == "piecewise":
            return np.asarray(self.knot_times[1:-1], dtype=float)
        return np.empty(0)

    def energy(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return self.params[0] * t
        if self.kind == "power":
            scale, exponent = self.params
            return scale * np.power(t, exponent)
        if self.kind == "tanh":
            return np.tanh(self.params[0] * t)
        if self.kind == "ramp":
            return self.params[0] * t / self.tau
        return np.interp(t, self.knot_times, self.knot_energies)

    def energy_rate(self, t, side: int = 1):
        """dE/dt.  ``side`` picks the one-sided limit at piecewise knots."""
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return np.full_like(t, self.params[0])
        if self.kind == "power":
            scale, exponent = self.params
            with np.errstate(divide="ignore"):
                return scale * exponent * np.power(t, exponent - 1.0)
        if self.kind == "tanh":
            a = self.params[0]
            return a / np.cosh(a * t) ** 2
        if self.kind == "ramp":
            return np.full_like(t, self.params[0] / self.tau)
        kt = np.asarray(self.knot_times)
        slopes = np.diff(self.knot_energies) / np.diff(kt)
        if side >= 0:
            idx = np.searchsorted(kt, t, side="right") - 1
        else:
            idx = np.searchsorted(kt, t, side="left") - 1
        idx = np.clip(idx, 0, slopes.size - 1)
        return slopes[idx]

    def energy_accel(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            scale, exponent = self.params
            with np.errstate(divide="ignore", invalid="ignore"):
                return scale * exponent * (exponent - 1.0) * np.power(t, exponent - 2.0)
        if self.kind == "tanh":
            a = self.params[0]
            return -2.0 * a * a * np.tanh(a * t) / np.cosh(a * t) ** 2
        return np.zeros_like(t)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "params": list(self.params), "tau": self.tau}
        if self.kind == "piecewise":
            out["knot_times"] = list(self.knot_times)
            out["knot_energies"] = list(self.knot_energies)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DriveProtocol":
        return cls(
            kind=data["kind"],
            params=tuple(float(x) for x in data.get("params", ())),
            tau=float(data["tau"]),
            knot_times=tuple(float(x) for x in data.get("knot_times", ())),
            knot_energies=tuple(float(x) for x in data.get("knot_energies", ())),
        )


def piecewise_protocol(times: Sequence[float], energies: Sequence[float]) -> DriveProtocol:
    times = tuple(float(x) for x in times)
    return DriveProtocol("piecewise", (), times[-1], times, tuple(float(x) for x in energies))


@dataclass(frozen=True)
class BathSpec:
    """Thermal bath: inverse temperature, coupling law and small-gap floor.

    ``coupling`` is ``"constant"`` (gamma = strength) or ``"ohmic"``
    (gamma = strength * E).
    """

    beta: float = 1.0
    coupling: str = "constant"
    strength: float = 0.1
    gap_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.coupling not in ("constant", "ohmic"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if not self.strength > 0:
            raise ValueError("coupling strength must be positive")
        if not self.gap_floor > 0:
            raise ValueError("gap_floor must be positive")

    def to_dict(self) -> dict:
        return {"beta": self.beta, "coupling": self.coupling,
                "strength": self.strength, "gap_floor": self.gap_floor}

    @classmethod
    def from_dict(cls, data: dict) -> "BathSpec":
        return cls(beta=float(data.get("beta", 1.0)), coupling=data.get("coupling", "constant"),
                   strength=float(data.get("strength", 0.1)),
                   gap_floor=float(data.get("gap_floor", 1e-6)))


def occupation(E, bath: BathSpec):
    """Bose-Einstein occupation of the bath mode at gap E."""
    E = np.asarray(E, dtype=float)
    if bath.coupling == "constant":
        E = np.maximum(E, bath.gap_floor)
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / np.expm1(bath.beta * E)


def coupling_rate(E, bath: BathSpec):
    E = np.asarray(E, dtype=float)
    if bath.coupling == "constant":
        return np.full_like(E, bath.strength)
    return bath.strength * E


def rates(E, bath: BathSpec):
    """Emission and absorption rates ``(r_down, r_up)``; always finite."""
    E = np.asarray(E, dtype=float)
    if bath.coupling == "constant":
        nbar = occupation(E, bath)
        return bath.strength * (nbar + 1.0), bath.strength * nbar
    # gamma * nbar = kappa * E / expm1(beta E), finite with limit kappa / beta
    x = bath.beta * E
    small = x < 1e-300
    safe = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        ratio = np.where(small, 1.0, safe / np.expm1(safe))
    up = bath.strength / bath.beta * ratio
    down = up + bath.strength * E
    return down, up


def relaxation_rate(E, bath: BathSpec):
    """Nonzero eigenvalue of the jump rate matrix, gamma * (2 nbar + 1)."""
    down, up = rates(E, bath)
    return down + up


def equilibrium_population(E, beta: float):
    E = np.asarray(E, dtype=float)
    return 0.5 * (1.0 - np.tanh(0.5 * beta * E))


def _log1p_exp_neg(x):
    return np.logaddexp(0.0, -np.asarray(x, dtype=float))


def free_energy_change(protocol: DriveProtocol, beta: float, t=None):
    """Equilibrium free-energy change between E(0) and E(t) (default t = tau)."""
    t = protocol.tau if t is None else t
    E0 = protocol.energy(0.0)
    Et = protocol.energy(t)
    return (_log1p_exp_neg(beta * E0) - _log1p_exp_neg(beta * Et)) / beta


def free_energy_change_quad(protocol: DriveProtocol, beta: float, t=None) -> float:
    """Same quantity as ``free_energy_change`` by adaptive quadrature over the gap."""
    t = protocol.tau if t is None else t
    E0 = float(protocol.energy(0.0))
    Et = float(protocol.energy(t))
    val, _ = integrate.quad(lambda e: float(equilibrium_population(e, beta)), E0, Et,
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


@dataclass(frozen=True)
class PurePrep:
    """Pure preparation, characterised only by its excited population."""

    p_e: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_e <= 1.0:
            raise ValueError("p_e must lie in [0, 1]")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    @property
    def p_g(self) -> float:
        return 1.0 - self.p_e

    @classmethod
    def from_bloch(cls, theta: float, weight: float = 1.0) -> "PurePrep":
        return cls(float(np.sin(0.5 * theta) ** 2), weight)


@dataclass(frozen=True)
class EnsembleSpec:
    """Decomposition of the initial density matrix into pure preparations.

    Either ``preps`` (discrete) or ``density`` over p_e in [0, 1] (continuous,
    integrated with ``quad_nodes`` Gauss-Legendre nodes) is set.
    """

    name: str
    preps: tuple[PurePrep, ...] = ()
    density: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    inverse_cdf: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    quad_nodes: int = 64

    def __post_init__(self) -> None:
        if self.density is None:
            if not self.preps:
                raise ValueError("ensemble needs preparations or a density")
            total = sum(p.weight for p in self.preps)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {total}, expected 1")
        else:
            _, w = self.quadrature()
            if abs(w.sum() - 1.0) > 1e-8:
                raise ValueError("density does not integrate to 1")

    @property
    def is_continuous(self) -> bool:
        return self.density is not None

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """Excited populations and weights used for every ensemble average."""
        if self.density is None:
            return (np.array([p.p_e for p in self.preps]),
                    np.array([p.weight for p in self.preps]))
        x, w = np.polynomial.legendre.leggauss(self.quad_nodes)
        p = 0.5 * (x + 1.0)
        return p, 0.5 * w * np.asarray(self.density(p), dtype=float)

    def mean_excited(self) -> float:
        p, w = self.quadrature()
        return float(np.dot(w, p))

    def is_classical(self) -> bool:
        p, w = self.quadrature()
        return bool(np.all((w == 0) | (p == 0) | (p == 1)))

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Map uniforms on [0, 1) to excited populations drawn from the ensemble."""
        u = np.asarray(uniforms, dtype=float)
        if self.density is None:
            p, w = self.quadrature()
            idx = np.searchsorted(np.cumsum(w), u, side="right")
            return p[np.minimum(idx, p.size - 1)]
        if self.inverse_cdf is not None:
            return np.asarray(self.inverse_cdf(u), dtype=float)
        grid = np.linspace(0.0, 1.0, 4097)
        cdf = integrate.cumulative_trapezoid(self.density(grid), grid, initial=0.0)
        return np.interp(u, cdf / cdf[-1], grid)

    def to_dict(self) -> dict:
        if self.density is None:
            return {"name": self.name,
                    "preps": [[p.p_e, p.weight] for p in self.preps]}
        return {"name": self.name, "quad_nodes": self.quad_nodes}


def eigenstate_ensemble() -> EnsembleSpec:
    """Equal mixture of |e> and |g>."""
    return EnsembleSpec("EG", (PurePrep(1.0, 0.5), PurePrep(0.0, 0.5)))


def plus_minus_ensemble() -> EnsembleSpec:
    """Equal mixture of |+> and |->; both have p_e = 1/2."""
    return EnsembleSpec("PM", (PurePrep(0.5, 0.5), PurePrep(0.5, 0.5)))


def haar_ensemble(quad_nodes: int = 64) -> EnsembleSpec:
    """Uniform pure states on the Bloch sphere, i.e. p_e uniform on [0, 1]."""
    return EnsembleSpec("Haar", density=lambda p: np.ones_like(p),
                        inverse_cdf=lambda u: np.asarray(u, dtype=float),
                        quad_nodes=quad_nodes)


def polar_pair(p: float) -> EnsembleSpec:
    """Equal mixture of two antipodal Bloch vectors with p_e = p and 1 - p."""
    return EnsembleSpec(f"polar({p:g})", (PurePrep(p, 0.5), PurePrep(1.0 - p, 0.5)))


def named_ensemble(name: str, quad_nodes: int = 64) -> EnsembleSpec:
    key = name.strip()
    if key.upper() in ("EG", "D_EG"):
        return eigenstate_ensemble()
    if key.upper() in ("PM", "D_PM"):
        return plus_minus_ensemble()
    if key.upper() in ("HAAR", "D_HAAR"):
        return haar_ensemble(quad_nodes)
    if key.lower().startswith("polar"):
        inner = key[key.index("(") + 1:key.rindex(")")]
        return polar_pair(float(inner))
    raise ValueError(f"unknown ensemble {name!r}")


def ensemble_from_dict(data: dict, quad_nodes: int = 64) -> EnsembleSpec:
    if "preps" in data:
        preps = tuple(PurePrep(float(p), float(w)) for p, w in data["preps"])
        return EnsembleSpec(data.get("name", "custom"), preps)
    return named_ensemble(data["name"], int(data.get("quad_nodes", quad_nodes)))
