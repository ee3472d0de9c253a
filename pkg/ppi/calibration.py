"""Calibration of the policy-quality parameter gamma.

Simulated corruption D-bar is matched to the empirical diversion-of-funds
level. Countries ordered by empirical corruption are split into contiguous
clusters sharing one gamma; the number of clusters is chosen with a
complexity penalty lambda * k * log(M).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from ppi.engine import SimulationConfig, run_seeds, run_simulation
from ppi.errors import CalibrationError, NoNetwork, SearchBoundsInvalid
from ppi.network import SpilloverNetwork

logger = logging.getLogger(__name__)

DEFAULT_GAMMA_BOUNDS = (1e-3, 2.0)
DEFAULT_TOLERANCE = 1e-3
DEFAULT_PENALTY = 1.0

INV_PHI = (np.sqrt(5) - 1) / 2
INV_PHI_SQ = (3 - np.sqrt(5)) / 2


@dataclass(frozen=True)
class CalibrationResult:
    gamma: Mapping[str, float]
    clusters: tuple[tuple[str, ...], ...]
    loss: float
    empirical: Mapping[str, float]
    simulated: Mapping[str, float]
    k: int = 1
    losses_by_k: Mapping[int, float] | None = None

    def cluster_of(self, country: str) -> int:
        for idx, members in enumerate(self.clusters):
            if country in members:
                return idx
        raise KeyError(country)

    def to_dict(self) -> dict:
        return {
            "countries": {
                c: {
                    "gamma": self.gamma[c],
                    "cluster": self.cluster_of(c),
                    "empirical": self.empirical[c],
                    "simulated": self.simulated[c],
                }
                for c in self.gamma
            },
            "k": self.k,
            "loss": self.loss,
            "losses_by_k": {str(k): v for k, v in (self.losses_by_k or {}).items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CalibrationResult":
        countries = data["countries"]
        n_clusters = 1 + max((v["cluster"] for v in countries.values()), default=-1)
        clusters = tuple(
            tuple(c for c, v in countries.items() if v["cluster"] == idx) for idx in range(n_clusters)
        )
        return cls(
            gamma={c: float(v["gamma"]) for c, v in countries.items()},
            clusters=clusters,
            loss=float(data["loss"]),
            empirical={c: float(v["empirical"]) for c, v in countries.items()},
            simulated={c: float(v["simulated"]) for c, v in countries.items()},
            k=int(data.get("k", n_clusters)),
            losses_by_k={int(k): float(v) for k, v in data.get("losses_by_k", {}).items()},
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def country_config(
    panel,
    country: str,
    network: SpilloverNetwork,
    gamma: float,
    initial=None,
    targets=None,
    **engine,
) -> SimulationConfig:
    """
    Engine configuration for one country: first-year indicators as the
    initial state and last-year indicators as targets unless given.
    """
    return SimulationConfig(
        initial=panel.first(country) if initial is None else initial,
        targets=panel.last(country) if targets is None else targets,
        network=network,
        gamma=gamma,
        budget=panel.budget(country),
        rl_index=panel.role_index("rule_of_law"),
        cc_index=panel.role_index("control_of_corruption"),
        **engine,
    )


def empirical_corruption(panel, country: str) -> float:
    """One minus the mean of the (higher-is-cleaner) diversion-of-funds indicator."""
    k = panel.role_index("diversion_of_funds")
    return 1.0 - float(panel.series(country)[:, k].mean())


def simulated_corruption(config: SimulationConfig, n_runs: int, seed: int) -> float:
    """Monte Carlo mean of D-bar."""
    if n_runs < 1:
        raise CalibrationError(f"n_runs must be at least 1, got {n_runs}")
    return float(np.mean([
        run_simulation(config.replace(seed=s)).corruption for s in run_seeds(seed, n_runs)
    ]))


def golden_section_search(
    obj: Callable[[float], float], a: float, b: float, tol: float = DEFAULT_TOLERANCE
) -> tuple[float, float]:
    """ golden section search minimizer on [a, b]

    Returns:
        (float, float): best evaluated point and its objective value
    """
    dist = b - a
    if dist <= tol:
        x = (a + b) / 2
        return x, obj(x)

    n = int(np.ceil(np.log(tol / dist) / np.log(INV_PHI)))
    c = a + INV_PHI_SQ * dist
    d = a + INV_PHI * dist
    yc = obj(c)
    yd = obj(d)
    for _ in range(n - 1):
        if yc < yd:
            b, d, yd = d, c, yc
            dist = INV_PHI * dist
            c = a + INV_PHI_SQ * dist
            yc = obj(c)
        else:
            a, c, yc = c, d, yd
            dist = INV_PHI * dist
            d = a + INV_PHI * dist
            yd = obj(d)
    return (c, yc) if yc < yd else (d, yd)


def _check_bounds(bounds: tuple[float, float]) -> None:
    lo, hi = bounds
    if not (np.isfinite(lo) and np.isfinite(hi) and 0 < lo < hi):
        raise SearchBoundsInvalid(lo, hi)


def fit_cluster_gamma(
    configs: Sequence[SimulationConfig],
    empirical: Sequence[float],
    n_runs: int,
    seed: int,
    bounds: tuple[float, float] = DEFAULT_GAMMA_BOUNDS,
    tol: float = DEFAULT_TOLERANCE,
) -> tuple[float, float, list[float]]:
    """
    Fit one gamma shared by a cluster of countries.

    Minimizes sum_c (D-bar_c(gamma) - empirical_c)^2. Every evaluation reuses
    the same run seeds, so the objective is deterministic in gamma.

    Returns:
        gamma, loss and the simulated D-bar of each config at that gamma
    """
    _check_bounds(bounds)
    if len(configs) != len(empirical) or not configs:
        raise CalibrationError("need one empirical value per config and at least one config")

    memo: dict[tuple[int, float], float] = {}

    def corruption(idx: int, gamma: float) -> float:
        key = (idx, gamma)
        if key not in memo:
            memo[key] = simulated_corruption(configs[idx].replace(gamma=gamma), n_runs, seed)
        return memo[key]

    def loss(gamma: float) -> float:
        return float(sum((corruption(k, gamma) - e) ** 2 for k, e in enumerate(empirical)))

    gamma, value = golden_section_search(loss, *bounds, tol=tol)
    simulated = [corruption(k, gamma) for k in range(len(configs))]
    logger.debug("cluster of %d: gamma=%.4f loss=%.6g", len(configs), gamma, value)
    return gamma, value, simulated


def fit_gamma(
    panel,
    networks: Mapping[str, SpilloverNetwork],
    countries: Sequence[str] | None = None,
    k_max: int = 1,
    n_runs: int = 100,
    seed: int = 0,
    penalty: float = DEFAULT_PENALTY,
    bounds: tuple[float, float] = DEFAULT_GAMMA_BOUNDS,
    tol: float = DEFAULT_TOLERANCE,
    **engine,
) -> CalibrationResult:
    """
    Calibrate gamma for every country.

    For k = 1..k_max the countries, sorted by empirical corruption, are split
    into the k contiguous segments of least total loss (dynamic programming over
    segments, each fitted by golden-section search). The k minimizing
    loss + penalty * k * log(M) is kept.
    """
    _check_bounds(bounds)
    if k_max < 1:
        raise CalibrationError(f"k_max must be at least 1, got {k_max}")
    countries = list(countries) if countries is not None else list(panel.countries)
    if not countries:
        raise CalibrationError("no countries to calibrate")
    for c in countries:
        if c not in networks:
            raise NoNetwork(c)

    empirical = {c: empirical_corruption(panel, c) for c in countries}
    ordered = sorted(countries, key=lambda c: (empirical[c], c))
    configs = [country_config(panel, c, networks[c], bounds[1], **engine) for c in ordered]
    targets = [empirical[c] for c in ordered]
    m = len(ordered)
    k_max = min(k_max, m)

    @cache
    def segment(i: int, j: int) -> tuple[float, float, tuple[float, ...]]:
        gamma, value, simulated = fit_cluster_gamma(configs[i:j], targets[i:j], n_runs, seed, bounds, tol)
        return gamma, value, tuple(simulated)

    @cache
    def best(k: int, j: int) -> tuple[float, tuple[int, ...]]:
        """Least loss splitting ordered[:j] into k segments, with the cut points."""
        if k == 1:
            return segment(0, j)[1], ()
        options = []
        for i in range(k - 1, j):
            head, cuts = best(k - 1, i)
            options.append((head + segment(i, j)[1], cuts + (i,)))
        return min(options, key=lambda o: (o[0], o[1]))

    losses = {k: best(k, m)[0] for k in range(1, k_max + 1)}
    scores = {k: losses[k] + penalty * k * np.log(m) for k in losses}
    chosen = min(scores, key=lambda k: (scores[k], k))
    bounds_idx = [0, *best(chosen, m)[1], m]

    gamma, simulated, clusters = {}, {}, []
    for i, j in zip(bounds_idx, bounds_idx[1:]):
        g, _, sims = segment(i, j)
        members = tuple(ordered[i:j])
        clusters.append(members)
        for c, d in zip(members, sims):
            gamma[c] = g
            simulated[c] = d

    logger.info("calibrated %d countries into %d clusters (loss %.6g)", m, chosen, losses[chosen])
    return CalibrationResult(
        gamma={c: gamma[c] for c in countries},
        clusters=tuple(clusters),
        loss=float(losses[chosen]),
        empirical=empirical,
        simulated={c: simulated[c] for c in countries},
        k=chosen,
        losses_by_k=losses,
    )


def calibration_table(panel, result: CalibrationResult) -> pd.DataFrame:
    """Empirical against simulated corruption with development level and income per country."""
    k = panel.role_index("diversion_of_funds")
    rows = []
    for c in result.gamma:
        means = panel.series(c).mean(axis=0)
        rows.append({
            "country": c,
            "empirical": result.empirical[c],
            "simulated": result.simulated[c],
            "gamma": result.gamma[c],
            "cluster": result.cluster_of(c),
            "mean_other_indicators": float(np.delete(means, k).mean()),
            "ipc": panel.ipc(c),
        })
    return pd.DataFrame(rows).set_index("country")
