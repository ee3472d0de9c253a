"""Batch command line: ppi synth | ingest | estimate-network | calibrate | simulate | coherence | grid | report."""

import functools
import json
import logging
from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError

from ppi import calibration, coherence, grid, network, panel as panel_mod
from ppi.engine import DEFAULT_EPSILON, DEFAULT_MAX_PERIODS, SimulationConfig, expected_profile, run_simulation, run_seeds
from ppi.errors import PPIError, UnknownCountry
from ppi.formatting import format_markdown

logger = logging.getLogger(__name__)

app = typer.Typer(help="Policy Priority Inference: networks, simulation, calibration and coherence.")

PanelOpt = typer.Option(..., "--panel", help="Long-format CSV: country, indicator, year, value")
MetaOpt = typer.Option(None, "--meta", help="JSON sidecar; defaults to the panel path with .json")
OutOpt = typer.Option(Path("out"), "--out", help="Output directory")


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def handle_errors(func):
    """Turn pipeline errors into a one-line message and exit code 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (PPIError, OSError, ValidationError) as e:
            typer.echo(f"error: {e}", err=True)
            raise typer.Exit(code=1)

    return wrapper


def _split(value: Optional[str]) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def _gammas(gamma: Optional[float], calibration_path: Optional[Path], countries: list[str]) -> dict[str, float]:
    if (gamma is None) == (calibration_path is None):
        raise PPIError("give exactly one of --gamma or --calibration")
    if gamma is not None:
        return {c: gamma for c in countries}
    fitted = calibration.CalibrationResult.load(calibration_path).gamma
    for c in countries:
        if c not in fitted:
            raise UnknownCountry(c)
    return {c: fitted[c] for c in countries}


@app.command()
@handle_errors
def synth(
    out: Path = OutOpt,
    countries: int = typer.Option(6, help="Number of countries"),
    indicators: int = typer.Option(15, help="Number of indicators"),
    years: int = typer.Option(12, help="Number of years"),
    seed: int = typer.Option(0, help="Generator seed"),
):
    """Write a synthetic panel (CSV plus JSON sidecar)."""
    generated = panel_mod.generate_synthetic_panel(countries, indicators, years, seed)
    csv_path, meta_path = panel_mod.save_panel(generated, out / "panel.csv")
    typer.echo(f"wrote {csv_path} and {meta_path}")


@app.command()
@handle_errors
def ingest(panel: Path = PanelOpt, meta: Optional[Path] = MetaOpt, out: Path = OutOpt):
    """Validate a panel and write its canonical JSON dump."""
    loaded = panel_mod.load_panel(panel, meta)
    path = _write_json(out / "panel_dump.json", panel_mod.panel_to_dict(loaded))
    typer.echo(format_markdown({
        "panel": dict(zip(("countries", "indicators", "years"), loaded.shape)),
        "written": str(path),
    }))


@app.command("estimate-network")
@handle_errors
def estimate_network(
    panel: Path = PanelOpt,
    meta: Optional[Path] = MetaOpt,
    country: Optional[str] = typer.Option(None, help="Country code; all countries when omitted"),
    pool: Optional[str] = typer.Option(None, help="Comma-separated countries whose series are pooled"),
    score: str = typer.Option("abs", help="TMFG score: abs or signed"),
    out: Path = OutOpt,
):
    """Estimate spillover networks and write them as JSON edge lists."""
    loaded = panel_mod.load_panel(panel, meta)
    countries = [country] if country else list(loaded.countries)
    for c in countries:
        net = network.estimate_network(loaded, c, _split(pool), score)
        path = _write_json(out / "networks" / f"{c}.json", net.to_dict())
        typer.echo(f"{c}: {len(net.edges())} edges -> {path}")


@app.command()
@handle_errors
def calibrate(
    panel: Path = PanelOpt,
    meta: Optional[Path] = MetaOpt,
    kmax: int = typer.Option(1, "--kmax", help="Largest number of gamma clusters"),
    runs: int = typer.Option(100, help="Monte Carlo runs per evaluation"),
    seed: int = typer.Option(0, help="Master seed"),
    penalty: float = typer.Option(calibration.DEFAULT_PENALTY, help="Cluster-count penalty lambda"),
    max_periods: int = typer.Option(DEFAULT_MAX_PERIODS, help="Cap on simulated periods"),
    epsilon: float = typer.Option(DEFAULT_EPSILON, help="Convergence tolerance"),
    out: Path = OutOpt,
):
    """Fit gamma per country and write calibration.json plus a comparison table."""
    loaded = panel_mod.load_panel(panel, meta)
    networks = network.estimate_networks(loaded)
    result = calibration.fit_gamma(
        loaded, networks, k_max=kmax, n_runs=runs, seed=seed, penalty=penalty,
        max_periods=max_periods, epsilon=epsilon,
    )
    result.save(out / "calibration.json")
    table = calibration.calibration_table(loaded, result)
    table.to_csv(out / "calibration_table.csv", lineterminator="\n")
    typer.echo(format_markdown({
        "calibration": {"clusters": result.k, "loss": result.loss},
        "gamma": dict(result.gamma),
    }))


@app.command()
@handle_errors
def simulate(
    config: Path = typer.Option(..., "--config", help="JSON simulation config"),
    runs: int = typer.Option(100, help="Monte Carlo runs"),
    seed: int = typer.Option(0, help="Master seed"),
    trace: bool = typer.Option(False, help="Also dump the first run's per-period trace"),
    out: Path = OutOpt,
):
    """Estimate an allocation profile from a JSON engine config."""
    with open(config, "r", encoding="utf-8") as f:
        cfg = SimulationConfig.from_dict(json.load(f))
    sample = expected_profile(cfg, runs, seed)
    _write_json(out / "profile.json", {
        "profile": sample.mean.shares.tolist(),
        "periods": sample.periods.tolist(),
        "corruption": sample.corruption.tolist(),
        "converged": sample.converged.tolist(),
    })
    if trace:
        first = run_simulation(cfg.replace(seed=run_seeds(seed, 1)[0]))
        _write_json(out / "trace.json", first.to_dict())
    typer.echo(format_markdown({
        "simulation": {
            "runs": runs,
            "converged runs": int(sample.converged.sum()),
            "mean periods": float(sample.periods.mean()),
        },
        "profile": dict(zip(cfg.network.labels, sample.mean.shares.round(4).tolist())),
    }))


@app.command("coherence")
@handle_errors
def coherence_cmd(
    panel: Path = PanelOpt,
    meta: Optional[Path] = MetaOpt,
    country: str = typer.Option(..., help="Country whose priorities are evaluated"),
    modes: str = typer.Option(..., help="Comma-separated development modes"),
    metric: coherence.Metric = typer.Option(coherence.Metric.L1, help="Distance metric"),
    gamma: Optional[float] = typer.Option(None, help="Fixed gamma"),
    calibration_path: Optional[Path] = typer.Option(None, "--calibration", help="calibration.json"),
    runs: int = typer.Option(100, help="Monte Carlo runs per profile"),
    seed: int = typer.Option(0, help="Master seed"),
    max_periods: int = typer.Option(DEFAULT_MAX_PERIODS, help="Cap on simulated periods"),
    out: Path = OutOpt,
):
    """Coherence of one country against one or more development modes."""
    loaded = panel_mod.load_panel(panel, meta)
    g = _gammas(gamma, calibration_path, [country])[country]
    net = network.estimate_network(loaded, country)
    engine = {"max_periods": max_periods}
    p = coherence.retrospective_profile(
        loaded, country, net, g, runs, grid.cell_seed(seed, country, grid.RETROSPECTIVE), **engine
    )
    rows = []
    for mode in _split(modes):
        q = coherence.consistent_profile(loaded, country, mode, net, g, runs, grid.cell_seed(seed, country, mode), **engine)
        result = coherence.coherence_with_significance(p, q, metric, loaded, country, mode)
        payload = {k: v for k, v in result.to_dict().items() if k != "h_samples"}
        _write_json(out / "cells" / f"{country}__{mode}.json", payload)
        rows.append({"mode": mode, "h": f"{result.h:.3f}{result.stars}", "p-value": result.p_value})
    typer.echo(format_markdown({f"{country} ({metric.value})": rows}))


@app.command("grid")
@handle_errors
def grid_cmd(spec: Path = typer.Option(..., "--spec", help="JSON experiment spec")):
    """Run (or resume) a country x mode grid and write its reports under the spec's out directory."""
    experiment = grid.ExperimentSpec.load(spec)
    loaded = panel_mod.load_panel(experiment.panel, experiment.meta)
    grids = grid.run_grids(experiment, panel=loaded)
    for metric, g in grids.items():
        target = experiment.out / metric.value if len(grids) > 1 else experiment.out
        grid.emit_report(g, target, ("csv", "json", "md"), panel=loaded)
        typer.echo(format_markdown({
            f"{metric.value} grid": {
                "cells": len(g.cells),
                "partial": g.partial,
                "best mode": {c: g.best_mode(c) for c in g.countries},
            }
        }))


@app.command()
@handle_errors
def report(
    grid_path: Path = typer.Option(..., "--grid", help="grid.json written by `ppi grid`"),
    out: Path = OutOpt,
    fmt: str = typer.Option("csv,json", "--format", help="Comma-separated: csv, json, md"),
    panel: Optional[Path] = typer.Option(None, "--panel", help="Panel the grid was run on; adds the series CSVs"),
    meta: Optional[Path] = MetaOpt,
):
    """Re-emit report files from a saved grid."""
    loaded = grid.load_grid(grid_path)
    indicators = panel_mod.load_panel(panel, meta) if panel is not None else None
    written = grid.emit_report(loaded, out, _split(fmt), panel=indicators)
    typer.echo(f"wrote {len(written)} files to {out}")


if __name__ == "__main__":
    app()
