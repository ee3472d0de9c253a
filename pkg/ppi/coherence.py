"""Coherence of policy priorities.

The retrospective profile P is inferred by simulating a country toward its own
final indicators; the consistent profile Q by simulating it toward a
development mode's initial indicators; the inconsistent profile R reverses
the ranking of Q. The index h = (d(P,R) - d(P,Q)) / (d(P,R) + d(P,Q)) lies in
[-1, 1]; its run-level distribution gives a two-sided significance level.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from ppi.calibration import country_config
from ppi.engine import AllocationProfile, ProfileSample, expected_profile
from ppi.errors import (
    DegenerateVector,
    RunCountMismatch,
    UndefinedIndex,
    UnknownCountry,
    UnknownMode,
)
from ppi.network import SpilloverNetwork, pearson
from ppi.panel import aggregate_by_pillar

logger = logging.getLogger(__name__)

STAR_THRESHOLDS = ((0.05, "**"), (0.1, "*"))


class Metric(str, Enum):
    L1 = "l1"
    COSINE = "cosine"
    CORRELATION = "correlation"
    EUCLIDEAN = "euclidean"


def _shares(profile) -> np.ndarray:
    if isinstance(profile, AllocationProfile):
        return profile.shares
    return np.asarray(profile, dtype=float)


def _optional_array(raw) -> np.ndarray | None:
    return None if raw is None else np.asarray(raw, dtype=float)


def stars_for(p_value: float) -> str:
    for threshold, stars in STAR_THRESHOLDS:
        if p_value < threshold:
            return stars
    return ""


@dataclass(frozen=True, eq=False)
class CoherenceResult:
    h: float
    h_samples: np.ndarray
    p_value: float
    stars: str
    diffs: np.ndarray
    metric: Metric
    pillar_diffs: Mapping[int, float] = field(default_factory=dict)
    country: str | None = None
    mode: str | None = None
    retrospective: np.ndarray | None = None
    consistent: np.ndarray | None = None

    def to_dict(self) -> dict:
        data = {
            "country": self.country,
            "mode": self.mode,
            "metric": self.metric.value,
            "h": self.h,
            "p_value": self.p_value,
            "stars": self.stars,
            "diffs": self.diffs.tolist(),
            "pillar_diffs": [{"pillar": int(p), "diff": float(v)} for p, v in self.pillar_diffs.items()],
            "h_samples": self.h_samples.tolist(),
        }
        if self.retrospective is not None:
            data["retrospective"] = self.retrospective.tolist()
        if self.consistent is not None:
            data["consistent"] = self.consistent.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "CoherenceResult":
        return cls(
            h=float(data["h"]),
            h_samples=np.asarray(data.get("h_samples", []), dtype=float),
            p_value=float(data["p_value"]),
            stars=data["stars"],
            diffs=np.asarray(data.get("diffs", []), dtype=float),
            metric=Metric(data["metric"]),
            pillar_diffs={int(d["pillar"]): float(d["diff"]) for d in data.get("pillar_diffs", [])},
            country=data.get("country"),
            mode=data.get("mode"),
            retrospective=_optional_array(data.get("retrospective")),
            consistent=_optional_array(data.get("consistent")),
        )


@dataclass(frozen=True)
class Inefficiencies:
    """P - Q per indicator (positive: over-expenditure) and summed per pillar."""

    diffs: np.ndarray
    pillar_diffs: Mapping[int, float]


# --- profiles ---

def retrospective_profile(
    panel,
    country: str,
    network: SpilloverNetwork,
    gamma: float,
    runs: int,
    seed: int,
    **engine,
) -> ProfileSample:
    """P: simulate from the country's first-year values to its last-year values."""
    config = country_config(panel, country, network, gamma, **engine)
    return expected_profile(config, runs, seed)


def consistent_profile(
    panel,
    country: str,
    mode: str,
    network: SpilloverNetwork,
    gamma: float,
    runs: int,
    seed: int,
    **engine,
) -> ProfileSample:
    """Q: simulate from the country's first-year values toward the mode's first-year values."""
    try:
        targets = panel.first(mode)
    except UnknownCountry:
        raise UnknownMode(mode) from None
    config = country_config(panel, country, network, gamma, targets=targets, **engine)
    return expected_profile(config, runs, seed)


def inconsistent_profile(q) -> AllocationProfile:
    """
    R: the values of Q reassigned in reverse rank order, so the top priority of
    Q receives the smallest share. Ties are ranked by indicator index.
    """
    shares = _shares(q)
    order = np.argsort(shares, kind="stable")
    reversed_ = np.empty_like(shares)
    reversed_[order] = np.sort(shares)[::-1]
    return AllocationProfile(reversed_)


def mode_average_profile(samples: Sequence) -> tuple[AllocationProfile, np.ndarray]:
    """
    Average consistent profile across modes with per-indicator standard errors.
    Each entry is a ProfileSample (its mean is used) or a profile.
    """
    means = np.array([_shares(s.mean if isinstance(s, ProfileSample) else s) for s in samples])
    if means.shape[0] < 1:
        raise ValueError("no profile samples to average")
    errors = means.std(axis=0, ddof=1) / np.sqrt(means.shape[0]) if means.shape[0] > 1 else np.zeros(means.shape[1])
    return AllocationProfile.normalized(means.mean(axis=0)), errors


# --- distances and index ---

def distance(x, y, metric: Metric | str = Metric.L1) -> float:
    x = _shares(x)
    y = _shares(y)
    if x.shape != y.shape:
        raise ValueError(f"profiles of different lengths: {x.shape} and {y.shape}")
    metric = Metric(metric)
    if metric is Metric.L1:
        return float(np.abs(x - y).sum())
    if metric is Metric.EUCLIDEAN:
        return float(np.linalg.norm(x - y))
    if metric is Metric.CORRELATION:
        x = x - x.mean()
        y = y - y.mean()
    nx_, ny_ = np.linalg.norm(x), np.linalg.norm(y)
    if nx_ == 0 or ny_ == 0:
        raise DegenerateVector(f"{metric.value} distance of a zero-norm vector")
    return float(max(0.0, 1.0 - np.dot(x, y) / (nx_ * ny_)))


def coherence_index(p, q, r, metric: Metric | str = Metric.L1) -> float:
    d_pr = distance(p, r, metric)
    d_pq = distance(p, q, metric)
    total = d_pr + d_pq
    if total <= 0:
        raise UndefinedIndex("P coincides with both Q and R")
    return (d_pr - d_pq) / total


def allocative_inefficiencies(p, q, pillars=None, panel=None) -> Inefficiencies:
    """
    Per-indicator P_i - Q_i; pillar sums come from `panel` or an explicit
    per-indicator pillar array.
    """
    diffs = _shares(p) - _shares(q)
    if panel is not None:
        by_pillar = aggregate_by_pillar(panel, diffs, "sum")
        pillar_diffs = {int(k): float(v) for k, v in by_pillar.items()}
    elif pillars is not None:
        by_pillar = pd.Series(diffs, index=np.asarray(pillars)).groupby(level=0).sum()
        pillar_diffs = {int(k): float(v) for k, v in by_pillar.items()}
    else:
        pillar_diffs = {}
    return Inefficiencies(diffs, pillar_diffs)


def coherence_with_significance(
    p_runs,
    q_runs,
    metric: Metric | str = Metric.L1,
    panel=None,
    country: str | None = None,
    mode: str | None = None,
) -> CoherenceResult:
    """
    Pair run m of P with run m of Q, build R_m from Q_m and compute h_m.

    h is the mean of h_m and the p-value is 2 min(frac(h_m <= 0), frac(h_m >= 0)).
    Runs where P_m coincides with both Q_m and R_m have no h_m and are skipped;
    only a cell with no defined run raises UndefinedIndex.
    """
    metric = Metric(metric)
    p_runs = p_runs.runs if isinstance(p_runs, ProfileSample) else np.asarray(p_runs, dtype=float)
    q_runs = q_runs.runs if isinstance(q_runs, ProfileSample) else np.asarray(q_runs, dtype=float)
    if p_runs.shape[0] != q_runs.shape[0]:
        raise RunCountMismatch(p_runs.shape[0], q_runs.shape[0])
    if p_runs.shape[0] < 30:
        logger.debug("significance from only %d runs", p_runs.shape[0])

    defined = []
    for p, q in zip(p_runs, q_runs):
        try:
            defined.append(coherence_index(p, q, inconsistent_profile(q), metric))
        except UndefinedIndex:
            continue
    skipped = p_runs.shape[0] - len(defined)
    if not defined:
        raise UndefinedIndex(f"P coincides with both Q and R in all {skipped} runs")
    if skipped:
        logger.warning("%s/%s: skipped %d of %d runs with an undefined index",
                       country, mode, skipped, p_runs.shape[0])
    samples = np.array(defined)
    p_value = min(1.0, 2.0 * min(np.mean(samples <= 0), np.mean(samples >= 0)))
    p_mean, q_mean = p_runs.mean(axis=0), q_runs.mean(axis=0)
    ineff = allocative_inefficiencies(p_mean, q_mean, panel=panel)
    return CoherenceResult(
        h=float(samples.mean()),
        h_samples=samples,
        p_value=float(p_value),
        stars=stars_for(p_value),
        diffs=ineff.diffs,
        metric=metric,
        pillar_diffs=ineff.pillar_diffs,
        country=country,
        mode=mode,
        retrospective=p_mean,
        consistent=q_mean,
    )


def indicator_similarity(panel, country: str, mode: str) -> float:
    """Pearson correlation of the country's final indicators with the mode's initial ones."""
    try:
        mode_initial = panel.first(mode)
    except UnknownCountry:
        raise UnknownMode(mode) from None
    return pearson(panel.last(country), mode_initial)


def register_coherence(mcp):
    from ppi.formatting import format_markdown
    from ppi.network import estimate_network
    from ppi.panel import load_panel

    @mcp.tool()
    def coherence(
        panel_path: str,
        country: str,
        mode: str,
        gamma: float,
        meta_path: str | None = None,
        metric: str = "l1",
        runs: int = 100,
        seed: int = 0,
        max_periods: int = 2000,
    ) -> str:
        """Coherence index of a country's policy priorities against a development mode.

        Args:
            panel_path: Long-format indicator CSV
            country: Country whose priorities are evaluated
            mode: Exemplary country whose initial indicators serve as targets
            gamma: Policy-quality parameter for the country
            meta_path: JSON sidecar (defaults to the CSV path with .json)
            metric: l1, cosine, correlation or euclidean
            runs: Monte Carlo runs per profile
            seed: Master seed
            max_periods: Cap on simulated periods per run
        """
        try:
            panel = load_panel(panel_path, meta_path)
            network = estimate_network(panel, country)
            p = retrospective_profile(panel, country, network, gamma, runs, seed, max_periods=max_periods)
            q = consistent_profile(panel, country, mode, network, gamma, runs, seed + 1, max_periods=max_periods)
            result = coherence_with_significance(p, q, metric, panel, country, mode)
        except Exception as e:
            return f"Unable to compute coherence: {e}"
        over = np.argsort(-result.diffs, kind="stable")[:5]
        under = np.argsort(result.diffs, kind="stable")[:5]
        ids = panel.indicator_ids
        return format_markdown({
            f"{country} following {mode}": {
                "h": f"{result.h:.3f}{result.stars}",
                "p-value": result.p_value,
                "metric": result.metric.value,
                "indicator similarity": indicator_similarity(panel, country, mode),
            },
            "largest over-expenditures": [f"{ids[k]}: {result.diffs[k]:+.4f}" for k in over],
            "largest under-expenditures": [f"{ids[k]}: {result.diffs[k]:+.4f}" for k in under],
        })
