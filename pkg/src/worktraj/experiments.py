"""Experiment configuration, dispatch and CSV emission.

Every CSV starts with a comment block holding the fully resolved configuration as
one line of JSON, so a file can be parsed back into an :class:`ExperimentConfig`
and regenerated byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .fluctuation import (XiRangeError, fdr_point, jensen_bound, xi_cumulant_consistency,
                          xi_from_ode, xi_mgf_route)
from .kernels import ResolutionError, build_grid, decay_kernels
from .model import (BathSpec, DriveProtocol, EnsembleSpec, ensemble_from_dict,
                    free_energy_change, named_ensemble)
from .moments import solve_mgf, solve_moment_hierarchy
from .oracle import discretize, enumerate_mgf, matrix_product_mgf
from .protocols import (BUILTIN_NAMES, ConvergenceError, ErasureSpec, FeasibilityError, builtin_protocol,
                        optimize_erasure_protocol)
from .trajectory import StepTable, run_batch

log = logging.getLogger(__name__)

NUMERICAL_ERRORS = (ResolutionError, XiRangeError, FeasibilityError, ConvergenceError,
                    ArithmeticError)
FIG2_ENSEMBLES = ("EG", "PM", "Haar")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass
class ExperimentConfig:
    experiment: str
    ensemble: dict = field(default_factory=lambda: {"name": "PM"})
    protocol: dict = field(default_factory=lambda: {"kind": "linear", "params": [0.5],
                                                    "tau": 5.0})
    bath: dict = field(default_factory=lambda: BathSpec().to_dict())
    grid: int = 2000
    dt: float | None = None
    trajectories: int | None = None
    seed: int = 0
    quad_nodes: int = 64
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown config field")
        if "experiment" not in data:
            raise ConfigError("experiment: missing")
        return cls(**data)


@dataclass(frozen=True)
class Resolved:
    """Validated domain objects built from a config."""

    config: ExperimentConfig
    ensemble: EnsembleSpec
    protocol: DriveProtocol
    bath: BathSpec


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    status: str = "complete"


@dataclass(frozen=True)
class Experiment:
    runner: Callable[[Resolved], list[Table]]
    dt: float
    trajectories: int
    options: dict
    multi_file: bool = False


def _check(field_name: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(f"{field_name}: {message}")


def _protocol_from_dict(data: dict) -> DriveProtocol:
    data = dict(data)
    kind = data.get("kind", data.get("name"))
    if kind in BUILTIN_NAMES:
        return builtin_protocol(kind, data.get("params", ()), data["tau"])
    return DriveProtocol.from_dict(data)


def resolve(config: ExperimentConfig) -> Resolved:
    """Fill experiment defaults and validate every referenced spec."""
    _check("experiment", config.experiment in EXPERIMENTS,
           f"unknown experiment {config.experiment!r}")
    spec = EXPERIMENTS[config.experiment]
    if config.dt is None:
        config.dt = spec.dt
    if config.trajectories is None:
        config.trajectories = spec.trajectories
    config.options = {**spec.options, **config.options}
    unknown = set(config.options) - set(spec.options)
    _check("options", not unknown, f"unknown option(s) {sorted(unknown)}")

    _check("grid", isinstance(config.grid, int) and config.grid >= 10, "must be an integer >= 10")
    _check("dt", isinstance(config.dt, (int, float)) and config.dt > 0, "must be positive")
    _check("trajectories", isinstance(config.trajectories, int) and config.trajectories >= 0,
           "must be a non-negative integer")
    _check("seed", isinstance(config.seed, int) and 0 <= config.seed < 2 ** 64,
           "must be an unsigned 64-bit integer")
    _check("quad_nodes", isinstance(config.quad_nodes, int) and config.quad_nodes >= 2,
           "must be an integer >= 2")
    built = {}
    for name, make in (("ensemble", lambda d: ensemble_from_dict(d, config.quad_nodes)),
                       ("protocol", _protocol_from_dict),
                       ("bath", BathSpec.from_dict)):
        try:
            built[name] = make(getattr(config, name))
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return Resolved(config, built["ensemble"], built["protocol"], built["bath"])


# --- CSV ------------------------------------------------------------------

def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def render_table(table: Table, config: ExperimentConfig) -> str:
    lines = [f"# worktraj experiment: {config.experiment}",
             f"# config: {config.to_json()}",
             f"# status: {table.status}"]
    lines += [f"# {note}" for note in table.notes]
    lines.append(",".join(table.columns))
    lines += [",".join(_cell(x) for x in row) for row in table.rows]
    return "\n".join(lines) + "\n"


def read_config(path) -> ExperimentConfig:
    """Parse the config echoed in a CSV comment block."""
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if line.startswith("# config: "):
                return ExperimentConfig.from_dict(json.loads(line[len("# config: "):]))
    raise ConfigError(f"config: no config comment in {path}")


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], np.array(rows[1:], dtype=object)


def write_outputs(tables: list[Table], config: ExperimentConfig, out, multi_file: bool):
    """Write tables; ``out`` is a directory for multi-file experiments, a file otherwise.

    Returns the written paths (``["-"]`` when printing a single table to stdout).
    """
    if out is None or str(out) == "-":
        sys.stdout.write(render_table(tables[0], config))
        return ["-"]
    out = Path(out)
    paths = []
    if multi_file:
        out.mkdir(parents=True, exist_ok=True)
        for t in tables:
            p = out / f"{t.name}.csv"
            p.write_text(render_table(t, config))
            paths.append(p)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(render_table(tables[0], config))
        paths.append(out)
    return paths


def run(config: ExperimentConfig, out=None) -> tuple[int, list]:
    """Resolve, run and write.  Exit status is 0, or 2 if any table is partial."""
    res = resolve(config)
    spec = EXPERIMENTS[config.experiment]
    if spec.multi_file and (out is None or str(out) == "-"):
        raise ConfigError("out: a directory is required for this experiment")
    tables = spec.runner(res)
    paths = write_outputs(tables, res.config, out, spec.multi_file)
    return (0 if all(t.status == "complete" for t in tables) else 2), paths


def _guarded(table: Table, fill: Callable[[Table], None]) -> Table:
    """Run ``fill`` and flag the table as partial if a numerical diagnostic fires."""
    try:
        fill(table)
    except NUMERICAL_ERRORS as exc:
        table.status = f"partial ({type(exc).__name__}: {exc})"
        log.error("%s: %s", table.name, exc)
    return table


def _subsample(t: np.ndarray, points: int | None) -> np.ndarray:
    """Indices of the grid nodes nearest to ``points`` equally spaced times."""
    if not points or points >= t.size:
        return np.arange(t.size)
    target = np.linspace(t[0], t[-1], points)
    idx = np.clip(np.searchsorted(t, target), 1, t.size - 1)
    idx -= (target - t[idx - 1]) < (t[idx] - target)
    return np.unique(idx)


def _derived_seed(seed: int, *keys: int) -> int:
    """Distinct, reproducible seeds for sub-runs of one experiment."""
    mixed = np.random.SeedSequence([seed, *keys]).generate_state(2, dtype=np.uint32)
    return int(mixed[0]) << 32 | int(mixed[1])


# --- single-purpose experiments --------------------------------------------

def _simulate(res: Resolved) -> list[Table]:
    cfg = res.config
    table = Table("simulate", ["statistic", "value", "standard_error"])

    def fill(t: Table):
        b = run_batch(res.ensemble, res.protocol, res.bath, cfg.dt, cfg.trajectories, cfg.seed)
        s = b.stats
        t.rows += [["mean", s.mean, s.se_mean], ["variance", s.variance, s.se_variance],
                   ["third_cumulant", s.central3, s.se_central3],
                   ["fourth_cumulant", s.cumulants[3], float("nan")],
                   ["heat_mean", b.heat_stats.mean, b.heat_stats.se_mean],
                   ["final_excited", float(b.p_final.mean()),
                    float(b.p_final.std(ddof=1) / np.sqrt(b.p_final.size))]]
        for u in cfg.options["u"]:
            t.rows.append([f"mgf(u={u:g})", *b.mgf(float(u))])
    return [_guarded(table, fill)]


def _moments(res: Resolved) -> list[Table]:
    cfg = res.config
    n_max = int(cfg.options["n_max"])
    cols = (["t", "E", "p_excited"] + [f"moment_{k}" for k in range(1, n_max + 1)]
            + [f"cumulant_{k}" for k in range(1, n_max + 1)] + ["mean_coherence"])
    table = Table("moments", cols)

    def fill(t: Table):
        ms = solve_moment_hierarchy(res.ensemble, res.protocol, res.bath, n_max,
                                    steps=cfg.grid)
        mom, cum = ms.moments, ms.cumulants
        pe = ms.G[:, 0, 0, :].sum(axis=-1)
        abar = ms.segment.mean_coherence()[::2]
        E = res.protocol.energy(ms.t)
        for i in _subsample(ms.t, cfg.options["points"]):
            t.rows.append([ms.t[i], E[i], pe[i], *mom[i, 1:], *cum[i], abar[i]])
    return [_guarded(table, fill)]


def _mgf(res: Resolved) -> list[Table]:
    cfg = res.config
    us = [float(u) for u in cfg.options["u"]]
    table = Table("mgf", ["t"] + [f"G(u={u:g})" for u in us])

    def fill(t: Table):
        series = solve_mgf(res.ensemble, res.protocol, res.bath, us, steps=cfg.grid)
        vals = series.value
        for i in _subsample(series.t, cfg.options["points"]):
            t.rows.append([series.t[i], *vals[:, i]])
    return [_guarded(table, fill)]


def _jarzynski(res: Resolved) -> list[Table]:
    cfg = res.config
    beta = res.bath.beta
    table = Table("jarzynski", ["t", "E", "mean_work", "delta_F", "W_diss", "xi_mgf",
                                "xi_ode", "bound", "bound_overflow"])
    if abs(float(res.protocol.energy(0.0))) > 1e-14:
        raise ConfigError("protocol: the Jarzynski analysis needs E(0) = 0")
    if abs(res.ensemble.mean_excited() - 0.5) > 1e-12:
        raise ConfigError("ensemble: the Jarzynski analysis needs mean p_e = 1/2")

    def fill(t: Table):
        grid = build_grid(res.protocol, res.bath, cfg.grid)
        kernels = decay_kernels(res.protocol, res.bath, grid)
        ms = solve_moment_hierarchy(res.ensemble, res.protocol, res.bath, 1, kernels=kernels)
        xm = xi_mgf_route(res.ensemble, res.protocol, res.bath, kernels=kernels)
        xo = xi_from_ode(res.ensemble, res.protocol, res.bath, kernels=kernels)
        bound, over = jensen_bound(xo, beta)
        dF = free_energy_change(res.protocol, beta, ms.t)
        E = res.protocol.energy(ms.t)
        for i in _subsample(ms.t, cfg.options["points"]):
            t.rows.append([ms.t[i], E[i], ms.mean[i], dF[i], ms.mean[i] - dF[i], xm.xi[i],
                           xo.xi[i], bound[i], bool(over[i])])
    return [_guarded(table, fill)]


def _family(protocol: DriveProtocol):
    base = protocol.to_dict()
    return lambda tau: DriveProtocol.from_dict({**base, "tau": tau})


FDR_COLUMNS = ["tau", "ensemble", "variance_rate", "dissipation_rate", "classical_deviation",
               "predicted_correction", "relaxation_time", "mean_coherence"]


def _fdr_rows(table: Table, ensembles, family, bath, taus, steps):
    for tau in taus:
        for ens in ensembles:
            p = fdr_point(ens, family(float(tau)), bath, steps)
            table.rows.append([p.tau, ens.name, p.variance_rate, p.dissipation_rate,
                               p.classical_deviation, p.predicted_correction,
                               p.relaxation_time, p.mean_coherence])


def _fdr(res: Resolved) -> list[Table]:
    cfg = res.config
    ensembles = [named_ensemble(n, cfg.quad_nodes) for n in cfg.options["ensembles"]]
    table = Table("fdr", FDR_COLUMNS)
    return [_guarded(table, lambda t: _fdr_rows(t, ensembles, _family(res.protocol), res.bath,
                                                cfg.options["taus"], cfg.grid))]


def _optimal(res: Resolved) -> list[Table]:
    cfg = res.config
    o = cfg.options
    spec = ErasureSpec(float(o["tau"]), float(o["p_start"]), float(o["p_end"]), res.bath,
                       int(o["nodes"]))
    table = Table("optimal_protocol", ["t", "E"])

    def fill(t: Table):
        r = optimize_erasure_protocol(spec)
        ms = solve_moment_hierarchy(named_ensemble("EG"), r.protocol, res.bath, 1,
                                    steps=cfg.grid)
        t.notes += [f"path_cost: {r.cost!r}",
                    f"resimulated_mean_work: {float(ms.mean[-1])!r}",
                    f"resimulated_final_excited: {float(ms.G[-1, 0, 0, :].sum())!r}"]
        t.rows += [[a, b] for a, b in zip(r.protocol.knot_times, r.protocol.knot_energies)]
    return [_guarded(table, fill)]


def _oracle(res: Resolved) -> list[Table]:
    cfg = res.config
    table = Table("oracle", ["n_steps", "u", "enumeration", "matrix_product", "continuum",
                             "mc", "mc_se"])

    def fill(t: Table):
        us = [float(u) for u in cfg.options["u"]]
        cont = solve_mgf(res.ensemble, res.protocol, res.bath, us, steps=cfg.grid).value[:, -1]
        for n in cfg.options["n_steps"]:
            model = discretize(res.protocol, res.bath, int(n))
            mc = None
            if cfg.trajectories > 0:
                table_ = StepTable(np.linspace(0, res.protocol.tau, int(n) + 1),
                                   model.energies, model.stay_excited, model.stay_ground)
                mc = run_batch(res.ensemble, res.protocol, res.bath, model.dt,
                               cfg.trajectories, _derived_seed(cfg.seed, int(n)), table_)
            for k, u in enumerate(us):
                m, se = mc.mgf(u) if mc is not None else (float("nan"), float("nan"))
                t.rows.append([int(n), u, enumerate_mgf(res.ensemble, model, u),
                               matrix_product_mgf(res.ensemble, model, u), cont[k], m, se])
    return [_guarded(table, fill)]


# --- figure reproductions ---------------------------------------------------

def _fig2(res: Resolved) -> list[Table]:
    cfg = res.config
    o = cfg.options
    ensembles = [named_ensemble(n, cfg.quad_nodes) for n in FIG2_ENSEMBLES]
    cols = ["tau"] + [f"D_{n}" for n in FIG2_ENSEMBLES]
    for n in FIG2_ENSEMBLES:
        cols += [f"mc_D_{n}", f"mc_D_{n}_se"]
    tables = []
    for kind in ("optimal", "linear"):
        group = {q: Table(f"fig2_{q}_{kind}", list(cols)) for q in ("mean", "stdev", "skewness")}
        group["skewness"].notes.append("skewness columns hold the third cumulant <(W-mu)^3>")
        taus = o["optimal_taus"] if kind == "optimal" else o["linear_taus"]

        def fill(_: Table, kind=kind, group=group, taus=taus):
            for row_id, tau in enumerate(taus):
                tau = float(tau)
                if kind == "optimal":
                    spec = ErasureSpec(tau, 0.5, float(o["p_end"]), res.bath, int(o["nodes"]))
                    prot = optimize_erasure_protocol(spec).protocol
                else:
                    prot = builtin_protocol("linear", (float(o["slope"]),), tau)
                kernels = decay_kernels(prot, res.bath, build_grid(prot, res.bath, cfg.grid))
                exact = {q: [tau] for q in group}
                mc = {q: [] for q in group}
                for k, ens in enumerate(ensembles):
                    cum = solve_moment_hierarchy(ens, prot, res.bath, 3,
                                                 kernels=kernels).cumulants[-1]
                    exact["mean"].append(cum[0])
                    exact["stdev"].append(np.sqrt(cum[1]))
                    exact["skewness"].append(cum[2])
                    if cfg.trajectories > 0:
                        s = run_batch(ens, prot, res.bath, cfg.dt, cfg.trajectories,
                                      _derived_seed(cfg.seed, row_id, k,
                                                    int(kind == "optimal"))).stats
                        sd = np.sqrt(s.variance)
                        mc["mean"] += [s.mean, s.se_mean]
                        mc["stdev"] += [sd, s.se_variance / (2 * sd) if sd > 0 else 0.0]
                        mc["skewness"] += [s.central3, s.se_central3]
                    else:
                        for q in mc:
                            mc[q] += [float("nan"), float("nan")]
                for q in group:
                    group[q].rows.append(exact[q] + mc[q])

        _guarded(group["mean"], fill)
        for q in ("stdev", "skewness"):
            group[q].status = group["mean"].status
        tables += list(group.values())
    return tables


FIG3_PROTOCOLS = (("linear", ("linear", (1.0,))), ("sqrt", ("power", (1.0, 0.5))),
                  ("cbrt", ("power", (1.0, 1.0 / 3.0))), ("tanh", ("tanh", (2.0,))))


def _fig3(res: Resolved) -> list[Table]:
    cfg = res.config
    o = cfg.options
    beta = res.bath.beta
    pm = named_ensemble("PM")
    polar = named_ensemble(f"polar({o['polar_p']:g})")
    tables = []
    for label, (kind, params) in FIG3_PROTOCOLS:
        table = Table(f"fig3_{label}", ["tau", "W_diss", "bound_D_PM",
                                        f"bound_polar_{o['polar_p']:g}"])

        def fill(t: Table, kind=kind, params=params):
            prot = builtin_protocol(kind, params, float(o["tau_max"]))
            kernels = decay_kernels(prot, res.bath, build_grid(prot, res.bath, cfg.grid))
            ms = solve_moment_hierarchy(named_ensemble("EG"), prot, res.bath, 1, kernels=kernels)
            wd = ms.mean - free_energy_change(prot, beta, ms.t)
            b_pm = jensen_bound(xi_from_ode(pm, prot, res.bath, kernels=kernels), beta)[0]
            b_po = jensen_bound(xi_from_ode(polar, prot, res.bath, kernels=kernels), beta)[0]
            for i in _subsample(ms.t, o["points"])[1:]:
                t.rows.append([ms.t[i], wd[i], b_pm[i], b_po[i]])
        tables.append(_guarded(table, fill))
    return tables


def _fig4(res: Resolved) -> list[Table]:
    cfg = res.config
    o = cfg.options
    bath = res.bath
    ohmic = BathSpec(bath.beta, "ohmic", float(o["ohmic_strength"]), bath.gap_floor)
    ensembles = [named_ensemble("EG"), named_ensemble("PM")]
    family = lambda tau: builtin_protocol("ramp", (1.0,), tau)  # noqa: E731
    tables = []
    for name, b in (("fig4a_ohmic", ohmic), ("fig4a_inset_constant", bath)):
        table = Table(name, FDR_COLUMNS)
        table.notes.append(f"bath: {json.dumps(b.to_dict(), sort_keys=True)}")
        tables.append(_guarded(table, lambda t, b=b: _fdr_rows(
            t, ensembles, family, b, o["fdr_taus"], cfg.grid)))
    pm = named_ensemble("PM")
    for name, (kind, params) in (("fig4b_linear", ("linear", (0.1,))),
                                 ("fig4c_cbrt", ("power", (0.1, 1.0 / 3.0)))):
        table = Table(name, ["tau", "log_rate", "prediction", "ratio", "in_regime"])
        table.notes.append(f"bath: {json.dumps(bath.to_dict(), sort_keys=True)}")

        def fill(t: Table, kind=kind, params=params):
            prot = builtin_protocol(kind, params, float(o["xi_tau_max"]))
            xc = xi_cumulant_consistency(pm, prot, bath, steps=2 * cfg.grid)
            ratio = xc.ratio
            for i in _subsample(xc.t, o["points"])[1:]:
                t.rows.append([xc.t[i], xc.log_rate[i], xc.prediction[i], ratio[i],
                               bool(xc.in_regime[i])])
        tables.append(_guarded(table, fill))
    return tables


EXPERIMENTS: dict[str, Experiment] = {
    "simulate": Experiment(_simulate, 1e-3, 10000, {"u": [1.0]}),
    "moments": Experiment(_moments, 1e-3, 0, {"n_max": 4, "points": 201}),
    "mgf": Experiment(_mgf, 1e-3, 0, {"u": [-1.0, 0.5, 1.0, 2.0], "points": 201}),
    "jarzynski": Experiment(_jarzynski, 1e-3, 0, {"points": 201}),
    "fdr": Experiment(_fdr, 1e-3, 0, {"taus": [5.0, 10.0, 20.0, 50.0, 100.0],
                                      "ensembles": ["EG", "PM"]}),
    "optimal-protocol": Experiment(_optimal, 1e-3, 0, {"tau": 200.0, "p_start": 0.5,
                                                       "p_end": 0.01, "nodes": 200}),
    "oracle": Experiment(_oracle, 1e-3, 100000, {"n_steps": [1, 2, 4, 8, 16], "u": [1.0]}),
    "fig2": Experiment(_fig2, 1e-2, 2000, {
        "optimal_taus": [40.0, 50.0, 60.0, 80.0, 100.0, 150.0, 200.0, 300.0, 400.0],
        "linear_taus": [1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 50.0],
        "slope": 0.5, "p_end": 0.01, "nodes": 200}, multi_file=True),
    "fig3": Experiment(_fig3, 1e-3, 0, {"tau_max": 10.0, "points": 101, "polar_p": 0.25},
                       multi_file=True),
    "fig4": Experiment(_fig4, 1e-3, 0, {"fdr_taus": [5.0, 10.0, 20.0, 50.0, 100.0],
                                        "ohmic_strength": 0.1, "xi_tau_max": 200.0,
                                        "points": 201}, multi_file=True),
}
