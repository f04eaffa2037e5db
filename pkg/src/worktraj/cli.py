"""Command-line entry point: ``worktraj <subcommand> [flags]``.

Flags override fields of the JSON file given by ``--config``; the resolved config
is echoed into every CSV written.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from .experiments import ConfigError, ExperimentConfig, read_config, run


def _parse_protocol(text: str, tau: float | None) -> dict:
    """``kind:p1,p2`` as in ``linear:0.5`` or ``power:1,0.3333``."""
    kind, _, rest = text.partition(":")
    params = [float(x) for x in rest.split(",") if x.strip()]
    out = {"kind": kind.strip(), "params": params}
    if tau is not None:
        out["tau"] = tau
    return out


def _common(f):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON config, or a CSV written earlier; flags override it."),
        click.option("--out", default=None, help="Output CSV file, or directory for figures."),
        click.option("--dt", type=float, default=None, help="Monte Carlo time step."),
        click.option("--trajectories", type=int, default=None, help="Monte Carlo sample size."),
        click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None),
        click.option("--grid", type=int, default=None, help="Base step count of the ODE grid."),
        click.option("--gap-floor", type=float, default=None,
                     help="Smallest gap used in constant-coupling rates."),
        click.option("--quad-nodes", type=int, default=None,
                     help="Quadrature nodes for continuous ensembles."),
        click.option("--ensemble", default=None, help="EG, PM, Haar or polar(p)."),
        click.option("--protocol", "protocol_text", default=None,
                     help="Drive as kind:params, e.g. linear:0.5 or power:1,0.5."),
        click.option("--tau", type=float, default=None, help="Protocol duration."),
        click.option("--beta", type=float, default=None),
        click.option("--coupling", type=click.Choice(["constant", "ohmic"]), default=None),
        click.option("--strength", type=float, default=None, help="Coupling constant."),
        click.option("--option", "extra", multiple=True, metavar="KEY=JSON",
                     help="Experiment option, e.g. --option 'u=[0.5,1]'."),
        click.option("-v", "--verbose", is_flag=True),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def build_config(experiment: str, config_path=None, dt=None, trajectories=None, seed=None,
                 grid=None, gap_floor=None, quad_nodes=None, ensemble=None, protocol_text=None,
                 tau=None, beta=None, coupling=None, strength=None, extra=()) -> ExperimentConfig:
    data: dict = {}
    if config_path:
        with open(config_path) as fh:
            text = fh.read()
        # a CSV written by this tool carries its own config
        data = (read_config(config_path).to_dict() if text.startswith("#")
                else json.loads(text))
        if data.get("experiment", experiment) != experiment:
            raise ConfigError(f"experiment: file says {data['experiment']!r}, "
                              f"command is {experiment!r}")
    data["experiment"] = experiment
    cfg = ExperimentConfig.from_dict(data)
    for name, value in (("dt", dt), ("trajectories", trajectories), ("seed", seed),
                        ("grid", grid), ("quad_nodes", quad_nodes)):
        if value is not None:
            setattr(cfg, name, value)
    bath = dict(cfg.bath)
    for name, value in (("gap_floor", gap_floor), ("beta", beta), ("coupling", coupling),
                        ("strength", strength)):
        if value is not None:
            bath[name] = value
    cfg.bath = bath
    if ensemble is not None:
        cfg.ensemble = {"name": ensemble}
    if protocol_text is not None:
        cfg.protocol = _parse_protocol(protocol_text, tau if tau is not None
                                       else cfg.protocol.get("tau"))
    elif tau is not None:
        cfg.protocol = {**cfg.protocol, "tau": tau}
    options = dict(cfg.options)
    for item in extra:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"options: expected KEY=JSON, got {item!r}")
        try:
            options[key.strip()] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"options.{key.strip()}: {exc}") from None
    cfg.options = options
    return cfg


def _execute(experiment: str, out, verbose: bool, **kw) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(experiment, **kw)
        status, paths = run(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    for p in paths:
        if p != "-":
            click.echo(str(p), err=True)
    if status:
        click.echo("numerical diagnostics fired; outputs are flagged as partial", err=True)
    sys.exit(status)


@click.group()
def main() -> None:
    """Work statistics of a driven, dissipative qubit with coherent initial ensembles."""


def _subcommand(name: str, help_text: str):
    @main.command(name, help=help_text)
    @_common
    def cmd(out, verbose, **kw):
        _execute(name, out, verbose, **kw)
    return cmd


simulate = _subcommand("simulate", "Monte Carlo batch of quantum-jump trajectories.")
moments = _subcommand("moments", "Work moments and cumulants from the moment hierarchy.")
mgf = _subcommand("mgf", "Work MGF on a grid of u values.")
jarzynski = _subcommand("jarzynski", "Jarzynski deviation xi, its bound and W_diss.")
fdr = _subcommand("fdr", "Fluctuation-dissipation scan over protocol durations.")
optimal_protocol = _subcommand("optimal-protocol", "Minimum-mean-work erasure protocol.")
oracle = _subcommand("oracle", "Small-N exact enumeration cross-check.")


@main.command("reproduce")
@click.argument("figure", type=click.Choice(["fig2", "fig3", "fig4"]))
@_common
def reproduce(figure, out, verbose, **kw):
    """Regenerate the data behind one of the figures as CSV files."""
    _execute(figure, out, verbose, **kw)


if __name__ == "__main__":
    main()
