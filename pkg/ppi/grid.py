"""Country x development-mode experiments.

A grid evaluates the coherence index of every target country against every
development mode. Completed cells are cached in SQLite keyed by everything
that determines them, so an interrupted grid resumes where it stopped and a
rerun with the same spec reproduces every cell.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from ppi.calibration import CalibrationResult
from ppi.coherence import (
    CoherenceResult,
    Metric,
    coherence_with_significance,
    consistent_profile,
    indicator_similarity,
    mode_average_profile,
    retrospective_profile,
)
from ppi.engine import DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_MAX_PERIODS
from ppi.errors import EmptyGrid, IoError, MissingCell, PPIError, TooFewModes, UnknownCountry
from ppi.formatting import format_table
from ppi.network import SpilloverNetwork, estimate_network, pearson
from ppi.panel import classify_groups, load_panel, naive_profiles, pillar_means

logger = logging.getLogger(__name__)

DEFAULT_DB = "ppi.db"
RETROSPECTIVE = "__retrospective__"


class ExperimentSpec(BaseModel):
    panel: Path
    meta: Path | None = None
    countries: list[str]
    modes: list[str]
    runs: int = Field(100, ge=1)
    seed: int = 0
    metrics: list[Metric] = Field(default_factory=lambda: [Metric.L1])
    gamma: float | None = Field(None, gt=0)
    calibration: Path | None = None
    out: Path = Path("out")
    workers: int = Field(1, ge=1)
    epsilon: float = Field(DEFAULT_EPSILON, gt=0)
    max_periods: int = Field(DEFAULT_MAX_PERIODS, ge=1)
    beta: float = DEFAULT_BETA
    database: Path | None = None

    @model_validator(mode="after")
    def _one_gamma_source(self):
        if (self.gamma is None) == (self.calibration is None):
            raise ValueError("give exactly one of 'gamma' or 'calibration'")
        if not self.countries or not self.modes or not self.metrics:
            raise ValueError("countries, modes and metrics must be non-empty")
        return self

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        """Read a JSON spec; relative paths resolve against the spec's directory."""
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        for key in ("panel", "meta", "calibration", "out", "database"):
            if data.get(key) is not None and not Path(data[key]).is_absolute():
                data[key] = str(path.parent / data[key])
        return cls.model_validate(data)

    @property
    def engine(self) -> dict:
        return {"epsilon": self.epsilon, "max_periods": self.max_periods, "beta": self.beta}

    @property
    def database_path(self) -> Path:
        return self.database or self.out / DEFAULT_DB

    def check(self, panel) -> None:
        for country in [*self.countries, *self.modes]:
            panel.country_index(country)

    def gammas(self) -> dict[str, float]:
        if self.gamma is not None:
            return {c: self.gamma for c in self.countries}
        fitted = CalibrationResult.load(self.calibration).gamma
        missing = [c for c in self.countries if c not in fitted]
        if missing:
            raise UnknownCountry(missing[0])
        return {c: fitted[c] for c in self.countries}


@dataclass(frozen=True, eq=False)
class CoherenceGrid:
    """Coherence results keyed by (mode, country) for one distance metric."""

    metric: Metric
    countries: tuple[str, ...]
    modes: tuple[str, ...]
    cells: Mapping[tuple[str, str], CoherenceResult] = field(default_factory=dict)

    @property
    def missing(self) -> list[tuple[str, str]]:
        return [(m, c) for m in self.modes for c in self.countries if (m, c) not in self.cells]

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    def cell(self, country: str, mode: str) -> CoherenceResult:
        try:
            return self.cells[(mode, country)]
        except KeyError:
            raise MissingCell(country, mode) from None

    def best_mode(self, country: str) -> str | None:
        """Mode with the highest h for the country; the first in mode order wins ties."""
        best, best_h = None, -np.inf
        for mode in self.modes:
            cell = self.cells.get((mode, country))
            if cell is not None and cell.h > best_h:
                best, best_h = mode, cell.h
        return best

    def mode_averages(self) -> dict[str, float]:
        out = {}
        for mode in self.modes:
            hs = [self.cells[(mode, c)].h for c in self.countries if (mode, c) in self.cells]
            if hs:
                out[mode] = float(np.mean(hs))
        return out

    def country_averages(self) -> dict[str, float]:
        out = {}
        for country in self.countries:
            hs = [self.cells[(m, country)].h for m in self.modes if (m, country) in self.cells]
            if hs:
                out[country] = float(np.mean(hs))
        return out

    def to_dict(self) -> dict:
        return {
            "metric": self.metric.value,
            "countries": list(self.countries),
            "modes": list(self.modes),
            "partial": self.partial,
            "cells": [self.cells[key].to_dict() for key in sorted(self.cells)],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CoherenceGrid":
        cells = {}
        for raw in data["cells"]:
            result = CoherenceResult.from_dict(raw)
            cells[(result.mode, result.country)] = result
        return cls(Metric(data["metric"]), tuple(data["countries"]), tuple(data["modes"]), cells)

    def __eq__(self, other):
        if not isinstance(other, CoherenceGrid):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


# --- seeds and cell cache ---

def cell_seed(master_seed: int, country: str, mode: str) -> int:
    """Seed for one cell, independent of which other cells are run."""
    digest = hashlib.sha256(f"{master_seed}:{country}:{mode}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def panel_digest(panel) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([panel.countries, panel.indicator_ids, panel.years]).encode("utf-8"))
    h.update(np.ascontiguousarray(panel.values).tobytes())
    return h.hexdigest()


def network_digest(network: SpilloverNetwork) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(list(network.labels)).encode("utf-8"))
    h.update(np.ascontiguousarray(network.adjacency, dtype=float).tobytes())
    return h.hexdigest()


def cell_params(
    spec: ExperimentSpec, country: str, mode: str, gamma: float, digest: str, network: str,
) -> str:
    return json.dumps({
        "country": country,
        "mode": mode,
        "gamma": gamma,
        "runs": spec.runs,
        "seed": spec.seed,
        "metrics": sorted(m.value for m in spec.metrics),
        "engine": spec.engine,
        "panel": digest,
        "network": network,
    }, sort_keys=True)


def setup_database(db_path=DEFAULT_DB):
    """
    Sets up the SQLite cache of completed grid cells.
    Args:
        db_path (str): Path to the SQLite database file.
    Returns:
        sqlite3.Connection: A connection object to the database.
    """
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS coherence_cells (
            params_json TEXT PRIMARY KEY,
            country TEXT NOT NULL,
            mode TEXT NOT NULL,
            payload_json TEXT NOT NULL,
            timestamp INTEGER NOT NULL
        )
    ''')
    conn.commit()
    return conn


def save_cell(conn, params_json: str, country: str, mode: str, results: Mapping[Metric, CoherenceResult]) -> None:
    payload = json.dumps({m.value: r.to_dict() for m, r in results.items()}, sort_keys=True)
    conn.execute('''
        INSERT OR REPLACE INTO coherence_cells (params_json, country, mode, payload_json, timestamp)
        VALUES (?, ?, ?, ?, ?)
    ''', (params_json, country, mode, payload, int(time.time())))
    conn.commit()


def get_cell(conn, params_json: str) -> dict[Metric, CoherenceResult] | None:
    row = conn.execute(
        "SELECT payload_json FROM coherence_cells WHERE params_json = ?", (params_json,)
    ).fetchone()
    if row is None:
        return None
    return {Metric(k): CoherenceResult.from_dict(v) for k, v in json.loads(row[0]).items()}


# --- running ---

@dataclass(frozen=True)
class _CountryJob:
    panel: object
    network: SpilloverNetwork
    gamma: float
    country: str
    modes: tuple[str, ...]
    runs: int
    seed: int
    metrics: tuple[Metric, ...]
    engine: Mapping


def _country_cells(job: _CountryJob):
    """Yield (mode, {metric: result}) for each pending mode of one country."""
    try:
        p = retrospective_profile(
            job.panel, job.country, job.network, job.gamma, job.runs,
            cell_seed(job.seed, job.country, RETROSPECTIVE), **job.engine,
        )
    except PPIError as e:
        logger.warning("retrospective profile for %s failed: %s", job.country, e)
        return
    for mode in job.modes:
        try:
            q = consistent_profile(
                job.panel, job.country, mode, job.network, job.gamma, job.runs,
                cell_seed(job.seed, job.country, mode), **job.engine,
            )
            yield mode, {
                m: coherence_with_significance(p, q, m, job.panel, job.country, mode) for m in job.metrics
            }
        except PPIError as e:
            logger.warning("cell (%s, %s) failed: %s", job.country, mode, e)


def _run_country_job(job: _CountryJob) -> list:
    return list(_country_cells(job))


def run_grids(
    spec: ExperimentSpec,
    panel=None,
    networks: Mapping[str, SpilloverNetwork] | None = None,
    conn=None,
) -> dict[Metric, CoherenceGrid]:
    """
    Compute every (country, mode) cell of the spec for all of its metrics.

    Cached cells are reused; new cells are persisted as soon as they complete.
    Cells that fail are logged and left out, which marks the grid partial.
    """
    panel = panel if panel is not None else load_panel(spec.panel, spec.meta)
    spec.check(panel)
    gammas = spec.gammas()
    digest = panel_digest(panel)
    own_conn = conn is None
    conn = setup_database(spec.database_path) if own_conn else conn

    results: dict[tuple[str, str], dict[Metric, CoherenceResult]] = {}
    net_digests: dict[str, str] = {}
    jobs = []
    try:
        for country in spec.countries:
            network = networks[country] if networks and country in networks else estimate_network(panel, country)
            net_digests[country] = network_digest(network)
            pending = []
            for mode in spec.modes:
                params = cell_params(spec, country, mode, gammas[country], digest, net_digests[country])
                cached = get_cell(conn, params)
                if cached is not None:
                    results[(mode, country)] = cached
                else:
                    pending.append(mode)
            if not pending:
                continue
            jobs.append(_CountryJob(
                panel, network, gammas[country], country, tuple(pending),
                spec.runs, spec.seed, tuple(spec.metrics), spec.engine,
            ))
        logger.info("grid: %d cached cells, %d countries with pending cells", len(results), len(jobs))

        def record(country: str, mode: str, cell: dict) -> None:
            params = cell_params(spec, country, mode, gammas[country], digest, net_digests[country])
            save_cell(conn, params, country, mode, cell)
            results[(mode, country)] = cell

        if spec.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=spec.workers) as pool:
                futures = {pool.submit(_run_country_job, job): job for job in jobs}
                for future in as_completed(futures):
                    job = futures[future]
                    for mode, cell in future.result():
                        record(job.country, mode, cell)
        else:
            for job in jobs:
                for mode, cell in _country_cells(job):
                    record(job.country, mode, cell)
    finally:
        if own_conn:
            conn.close()

    grids = {}
    for metric in spec.metrics:
        cells = {key: cell[metric] for key, cell in results.items() if metric in cell}
        grids[metric] = CoherenceGrid(metric, tuple(spec.countries), tuple(spec.modes), cells)
        if grids[metric].partial:
            logger.warning("%s grid is partial: %d missing cells", metric.value, len(grids[metric].missing))
    return grids


# --- analyses over a grid ---

def mode_performance_correlation(grid: CoherenceGrid, panel, measure: str = "ipc") -> float:
    """Pearson correlation between each mode's average h and its performance."""
    averages = grid.mode_averages()
    if len(averages) < 3:
        raise TooFewModes(len(averages))
    modes = list(averages)
    if measure == "ipc":
        performance = [panel.ipc(m) for m in modes]
    elif measure == "mean_indicators":
        performance = [float(panel.first(m).mean()) for m in modes]
    else:
        raise ValueError(f"unknown performance measure '{measure}'")
    return pearson(performance, [averages[m] for m in modes])


def similarity_vs_coherence(country: str, modes: Iterable[str], grid: CoherenceGrid, panel) -> list[dict]:
    """(similarity, h) pairs for one country across modes."""
    return [
        {
            "mode": mode,
            "similarity": indicator_similarity(panel, country, mode),
            "h": grid.cell(country, mode).h,
        }
        for mode in modes
    ]


def coherence_vs_income(grid: CoherenceGrid, panel, country: str) -> pd.DataFrame:
    """One country's h against each mode's income; attrs['reference_ipc'] is the country's own."""
    rows = [
        {"mode": m, "ipc": panel.ipc(m), "h": grid.cells[(m, country)].h, "stars": grid.cells[(m, country)].stars}
        for m in grid.modes if (m, country) in grid.cells
    ]
    frame = pd.DataFrame(rows, columns=["mode", "ipc", "h", "stars"]).set_index("mode")
    frame.attrs["reference_ipc"] = panel.ipc(country)
    return frame


def coherence_table(grid: CoherenceGrid) -> pd.DataFrame:
    """Modes x countries with star-annotated h and an average row."""
    table = pd.DataFrame(index=list(grid.modes), columns=list(grid.countries), dtype=object)
    table.index.name = "mode"
    for (mode, country), cell in grid.cells.items():
        table.loc[mode, country] = f"{cell.h:.2f}{cell.stars}"
    averages = grid.country_averages()
    table.loc["Average"] = [f"{averages[c]:.2f}" if c in averages else "" for c in grid.countries]
    return table.fillna("")


def consistent_profile_table(grid: CoherenceGrid, panel) -> pd.DataFrame:
    """Per country, the consistent profile averaged over its modes with standard errors."""
    frames = []
    for country in grid.countries:
        profiles = [
            grid.cells[(m, country)].consistent for m in grid.modes
            if (m, country) in grid.cells and grid.cells[(m, country)].consistent is not None
        ]
        if not profiles:
            continue
        mean, errors = mode_average_profile(profiles)
        frames.append(pd.DataFrame({
            "country": country,
            "indicator": panel.indicator_ids,
            "pillar": panel.pillars,
            "modes": len(profiles),
            "mean": mean.shares,
            "error": errors,
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["country", "indicator", "pillar", "modes", "mean", "error"]
    )


def _series_frames(grid: CoherenceGrid, panel) -> dict[str, pd.DataFrame]:
    """Data behind the descriptive and coherence plots, one frame per CSV file."""
    frames: dict[str, pd.DataFrame] = {}
    if panel.reference is not None:
        groups = classify_groups(panel, panel.reference, panel.early_members)
        means = pillar_means(panel, groups)
        means.columns = [f"group_{g}" for g in means.columns]
        frames["pillar_means.csv"] = means.reset_index()

    naive, income, similarity = [], [], []
    for country in grid.countries:
        naive.append(naive_profiles(panel, country).reset_index().assign(country=country))
        frame = coherence_vs_income(grid, panel, country)
        income.append(frame.reset_index().assign(country=country, reference_ipc=frame.attrs["reference_ipc"]))
        modes = [m for m in grid.modes if (m, country) in grid.cells]
        try:
            rows = similarity_vs_coherence(country, modes, grid, panel)
        except PPIError as e:
            logger.warning("no similarity series for %s: %s", country, e)
            continue
        similarity.extend({"country": country, **row} for row in rows)
    frames["naive_profiles.csv"] = pd.concat(naive, ignore_index=True)[["country", "pillar", "initial", "final", "gap"]]
    frames["coherence_vs_income.csv"] = pd.concat(income, ignore_index=True)[
        ["country", "mode", "ipc", "h", "stars", "reference_ipc"]
    ]
    frames["similarity_vs_coherence.csv"] = pd.DataFrame(similarity, columns=["country", "mode", "similarity", "h"])

    performance = []
    for measure in ("ipc", "mean_indicators"):
        try:
            performance.append({"measure": measure, "correlation": mode_performance_correlation(grid, panel, measure)})
        except PPIError as e:
            logger.warning("no mode-performance correlation on %s: %s", measure, e)
    frames["mode_performance.csv"] = pd.DataFrame(performance, columns=["measure", "correlation"])
    frames["consistent_profiles.csv"] = consistent_profile_table(grid, panel)
    return frames


def emit_report(grid: CoherenceGrid, out_dir, formats: Sequence[str] = ("csv", "json"), panel=None) -> list[Path]:
    """
    Write the grid as files under out_dir:
    table.csv and mode_averages.csv (csv), grid.json and cells/*.json (json), grid.md (md).
    Given the panel, the csv format also writes pillar_means.csv, naive_profiles.csv,
    coherence_vs_income.csv, similarity_vs_coherence.csv, mode_performance.csv and
    consistent_profiles.csv.
    """
    if not grid.cells:
        raise EmptyGrid("grid has no cells to report")
    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = out_dir / "table.csv"
            coherence_table(grid).to_csv(path, lineterminator="\n")
            written.append(path)
            averages = grid.mode_averages()
            path = out_dir / "mode_averages.csv"
            pd.DataFrame(
                {"mode": list(averages), "average_h": list(averages.values())}
            ).to_csv(path, index=False, lineterminator="\n")
            written.append(path)
            if panel is not None:
                for name, frame in _series_frames(grid, panel).items():
                    path = out_dir / name
                    frame.to_csv(path, index=False, lineterminator="\n")
                    written.append(path)
        if "json" in formats:
            path = out_dir / "grid.json"
            path.write_text(json.dumps(grid.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
            written.append(path)
            cells_dir = out_dir / "cells"
            cells_dir.mkdir(exist_ok=True)
            for (mode, country), cell in sorted(grid.cells.items()):
                path = cells_dir / f"{country}__{mode}.json"
                payload = {k: v for k, v in cell.to_dict().items() if k != "h_samples"}
                path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
                written.append(path)
        if "md" in formats:
            path = out_dir / "grid.md"
            table = coherence_table(grid).reset_index()
            path.write_text(format_table(table.to_dict("records")) + "\n", encoding="utf-8")
            written.append(path)
    except OSError as e:
        raise IoError(out_dir, str(e)) from e
    logger.info("wrote %d report files to %s", len(written), out_dir)
    return written


def load_grid(path) -> CoherenceGrid:
    with open(path, "r", encoding="utf-8") as f:
        return CoherenceGrid.from_dict(json.load(f))


def register_analysis(mcp):
    from ppi.formatting import format_markdown

    @mcp.tool()
    def run_experiment(spec_path: str) -> str:
        """Run (or resume) a country x development-mode coherence grid from a JSON spec.

        Args:
            spec_path: JSON experiment spec (panel, countries, modes, runs, seed, metrics, gamma or calibration)
        """
        try:
            spec = ExperimentSpec.load(spec_path)
            grids = run_grids(spec)
        except Exception as e:
            return f"Unable to run experiment: {e}"
        sections = {}
        for metric, grid in grids.items():
            sections[f"{metric.value} grid"] = {
                "cells": f"{len(grid.cells)} of {len(grid.modes) * len(grid.countries)}",
                "best mode per country": {c: grid.best_mode(c) for c in grid.countries},
                "average h per mode": grid.mode_averages(),
            }
        return format_markdown(sections)
