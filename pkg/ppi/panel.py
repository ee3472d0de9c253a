"""Development-indicator panel: loading, validation, country groups and pillar summaries.

A panel is a complete country x indicator x year cube of normalized values in
[0, 1] plus the sidecar metadata the rest of the pipeline needs (pillars, role
indicators, income per capita and budget fraction per country).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from ppi.errors import (
    DimensionTooSmall,
    EmptyGroup,
    MalformedFile,
    MissingRole,
    PanelError,
    UnknownCountry,
    ValueOutOfRange,
)

logger = logging.getLogger(__name__)

ROLES = ("rule_of_law", "control_of_corruption", "diversion_of_funds")
N_PILLARS = 13
DEFAULT_SCHEMA = {"country": "country", "indicator": "indicator", "year": "year", "value": "value"}

GROUP_LABELS = {
    1: "early members",
    2: "higher income than reference",
    3: "reference",
    4: "lower income than reference",
}


@dataclass(frozen=True)
class Indicator:
    id: str
    pillar: int
    adjusted: bool = True


@dataclass(frozen=True)
class CountryMeta:
    ipc: float
    budget: float


@dataclass(frozen=True, eq=False)
class IndicatorPanel:
    """Immutable country x indicator x year panel."""

    countries: tuple[str, ...]
    indicators: tuple[Indicator, ...]
    years: tuple[int, ...]
    values: np.ndarray
    roles: Mapping[str, str]
    country_meta: Mapping[str, CountryMeta]
    reference: str | None = None
    early_members: tuple[str, ...] = ()
    _country_pos: Mapping[str, int] = field(init=False, repr=False)
    _indicator_pos: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        set_ = lambda name, value: object.__setattr__(self, name, value)
        set_("countries", tuple(self.countries))
        set_("indicators", tuple(self.indicators))
        set_("years", tuple(int(y) for y in self.years))
        set_("early_members", tuple(self.early_members))
        set_("roles", MappingProxyType(dict(self.roles)))
        set_("country_meta", MappingProxyType(dict(self.country_meta)))

        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        set_("values", values)
        set_("_country_pos", MappingProxyType({c: k for k, c in enumerate(self.countries)}))
        set_("_indicator_pos", MappingProxyType({ind.id: k for k, ind in enumerate(self.indicators)}))
        self._validate()

    def _validate(self):
        where = "<panel>"
        if len(self._country_pos) != len(self.countries):
            raise MalformedFile(where, "duplicate country codes")
        if len(self._indicator_pos) != len(self.indicators):
            raise MalformedFile(where, "duplicate indicator ids")
        if len(self.years) < 2 or any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise MalformedFile(where, "years must be strictly increasing with at least two entries")
        expected = (len(self.countries), len(self.indicators), len(self.years))
        if self.values.shape != expected:
            raise MalformedFile(where, f"values have shape {self.values.shape}, expected {expected}")

        bad = ~np.isfinite(self.values) | (self.values < 0.0) | (self.values > 1.0)
        if bad.any():
            c, i, t = (int(k) for k in np.argwhere(bad)[0])
            raise ValueOutOfRange(
                self.countries[c], self.indicators[i].id, self.years[t], float(self.values[c, i, t])
            )

        for ind in self.indicators:
            if not 1 <= ind.pillar <= N_PILLARS:
                raise MalformedFile(where, f"indicator {ind.id} has pillar {ind.pillar}")
        for role in ROLES:
            if role not in self.roles:
                raise MissingRole(role)
            if self.roles[role] not in self._indicator_pos:
                raise MalformedFile(where, f"role {role} maps to unknown indicator {self.roles[role]}")

        for country in self.countries:
            meta = self.country_meta.get(country)
            if meta is None:
                raise MalformedFile(where, f"no metadata for country {country}")
            if not 0.0 < meta.budget <= 1.0:
                raise MalformedFile(where, f"budget fraction {meta.budget} for {country} outside (0, 1]")
        if self.reference is not None and self.reference not in self._country_pos:
            raise UnknownCountry(self.reference)
        for country in self.early_members:
            if country not in self._country_pos:
                raise UnknownCountry(country)

    def __eq__(self, other):
        if not isinstance(other, IndicatorPanel):
            return NotImplemented
        return (
            self.countries == other.countries
            and self.indicators == other.indicators
            and self.years == other.years
            and dict(self.roles) == dict(other.roles)
            and dict(self.country_meta) == dict(other.country_meta)
            and self.reference == other.reference
            and self.early_members == other.early_members
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __reduce__(self):
        # mapping proxies do not pickle; worker processes get the canonical dump
        return panel_from_dict, (panel_to_dict(self),)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def indicator_ids(self) -> tuple[str, ...]:
        return tuple(ind.id for ind in self.indicators)

    @property
    def pillars(self) -> np.ndarray:
        return np.array([ind.pillar for ind in self.indicators], dtype=int)

    def country_index(self, country: str) -> int:
        try:
            return self._country_pos[country]
        except KeyError:
            raise UnknownCountry(country) from None

    def indicator_index(self, indicator: str) -> int:
        return self._indicator_pos[indicator]

    def role_index(self, role: str) -> int:
        if role not in self.roles:
            raise MissingRole(role)
        return self.indicator_index(self.roles[role])

    def series(self, country: str) -> np.ndarray:
        """Years x indicators slice for one country."""
        return self.values[self.country_index(country)].T

    def first(self, country: str) -> np.ndarray:
        return self.values[self.country_index(country), :, 0]

    def last(self, country: str) -> np.ndarray:
        return self.values[self.country_index(country), :, -1]

    def budget(self, country: str) -> float:
        self.country_index(country)
        return self.country_meta[country].budget

    def ipc(self, country: str) -> float:
        self.country_index(country)
        return self.country_meta[country].ipc


@dataclass(frozen=True)
class CountryGroups:
    assignment: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "assignment", MappingProxyType(dict(self.assignment)))
        if sum(1 for g in self.assignment.values() if g == 3) != 1:
            raise PanelError("group 3 must contain exactly one country")
        if any(g not in GROUP_LABELS for g in self.assignment.values()):
            raise PanelError("group labels must be in {1, 2, 3, 4}")

    def members(self, group: int) -> tuple[str, ...]:
        return tuple(c for c, g in self.assignment.items() if g == group)

    @property
    def reference(self) -> str:
        return self.members(3)[0]


# --- loading and serialization ---

def _read_meta(meta_path: Path) -> dict:
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise MalformedFile(meta_path, "metadata sidecar not found") from None
    except json.JSONDecodeError as e:
        raise MalformedFile(meta_path, f"invalid JSON: {e}") from None


def _indicators_from_meta(raw, meta_path="<panel>") -> list[Indicator]:
    if isinstance(raw, dict):
        raw = [{"id": k, **v} for k, v in raw.items()]
    indicators = []
    for r in raw:
        try:
            pillar = r["pillar"]
            if isinstance(pillar, bool) or int(pillar) != pillar:
                raise ValueError(pillar)
            indicators.append(Indicator(str(r["id"]), int(pillar), bool(r.get("adjusted", True))))
        except (KeyError, TypeError, ValueError):
            raise MalformedFile(meta_path, f"indicator entry {r!r} needs an id and an integer pillar") from None
    return indicators


def _country_meta_from_meta(raw: Mapping, meta_path="<panel>") -> dict[str, CountryMeta]:
    out = {}
    for country, m in raw.items():
        try:
            out[country] = CountryMeta(float(m["ipc"]), float(m["budget"]))
        except (KeyError, TypeError, ValueError):
            raise MalformedFile(meta_path, f"country '{country}' needs numeric 'ipc' and 'budget'") from None
    return out


def load_panel(path, meta=None, schema: Mapping[str, str] | None = None) -> IndicatorPanel:
    """
    Load a long-format CSV (country, indicator, year, value) and its JSON sidecar.

    Args:
        path: CSV file path.
        meta: JSON sidecar path; defaults to the CSV path with a .json suffix.
        schema: map from logical column name to the CSV header used for it.

    Returns:
        IndicatorPanel: validated panel. Incomplete panels are rejected, never imputed.
    """
    path = Path(path)
    meta_path = Path(meta) if meta is not None else path.with_suffix(".json")
    columns = {**DEFAULT_SCHEMA, **(schema or {})}

    try:
        df = pd.read_csv(
            path,
            dtype={columns["country"]: str, columns["indicator"]: str},
            float_precision="round_trip",
        )
    except FileNotFoundError:
        raise MalformedFile(path, "file not found") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedFile(path, f"unreadable CSV: {e}") from None

    missing = [logical for logical, header in columns.items() if header not in df.columns]
    if missing:
        raise MalformedFile(path, f"missing columns: {', '.join(missing)}")
    df = df.rename(columns={header: logical for logical, header in columns.items()})[list(columns)]

    if df[["country", "indicator", "year"]].isna().any().any():
        raise MalformedFile(path, "blank country, indicator or year")
    df["value"] = pd.to_numeric(df["value"], errors="coerce")
    try:
        df["year"] = df["year"].astype(int)
    except (TypeError, ValueError):
        raise MalformedFile(path, "non-integer year") from None
    if df.duplicated(subset=["country", "indicator", "year"]).any():
        raise MalformedFile(path, "duplicate (country, indicator, year) rows")

    raw = _read_meta(meta_path)
    indicators = _indicators_from_meta(raw.get("indicators", []), meta_path)
    indicator_ids = [ind.id for ind in indicators]
    unknown = sorted(set(df["indicator"]) - set(indicator_ids))
    if unknown:
        raise MalformedFile(path, f"indicators without sidecar metadata: {', '.join(unknown)}")

    countries = list(raw.get("countries", {})) or sorted(df["country"].unique())
    extra = sorted(set(df["country"]) - set(countries))
    if extra:
        raise MalformedFile(path, f"countries without sidecar metadata: {', '.join(extra)}")
    years = sorted(df["year"].unique())

    cube = (
        df.set_index(["country", "indicator", "year"])["value"]
        .reindex(pd.MultiIndex.from_product([countries, indicator_ids, years]))
    )
    if cube.isna().any():
        c, i, t = cube[cube.isna()].index[0]
        raise MalformedFile(path, f"missing or non-numeric cell ({c}, {i}, {t})")
    values = cube.to_numpy().reshape(len(countries), len(indicator_ids), len(years))

    meta_by_country = _country_meta_from_meta(raw.get("countries", {}), meta_path)
    panel = IndicatorPanel(
        countries=tuple(countries),
        indicators=tuple(indicators),
        years=tuple(years),
        values=values,
        roles=raw.get("roles", {}),
        country_meta=meta_by_country,
        reference=raw.get("reference"),
        early_members=tuple(raw.get("early_members", ())),
    )
    logger.info("loaded panel %s with shape %s", path, panel.shape)
    return panel


def panel_meta(panel: IndicatorPanel) -> dict:
    return {
        "indicators": {ind.id: {"pillar": ind.pillar, "adjusted": ind.adjusted} for ind in panel.indicators},
        "roles": dict(panel.roles),
        "countries": {
            c: {"ipc": panel.country_meta[c].ipc, "budget": panel.country_meta[c].budget}
            for c in panel.countries
        },
        "reference": panel.reference,
        "early_members": list(panel.early_members),
    }


def panel_to_dict(panel: IndicatorPanel) -> dict:
    """Canonical JSON-ready dump."""
    return {
        **panel_meta(panel),
        "countries_order": list(panel.countries),
        "years": list(panel.years),
        "values": panel.values.tolist(),
    }


def panel_from_dict(data: Mapping) -> IndicatorPanel:
    countries = data.get("countries_order") or list(data["countries"])
    return IndicatorPanel(
        countries=tuple(countries),
        indicators=tuple(_indicators_from_meta(data["indicators"])),
        years=tuple(data["years"]),
        values=np.asarray(data["values"], dtype=float),
        roles=data["roles"],
        country_meta=_country_meta_from_meta(data["countries"]),
        reference=data.get("reference"),
        early_members=tuple(data.get("early_members", ())),
    )


def save_panel(panel: IndicatorPanel, path, meta=None) -> tuple[Path, Path]:
    """Write the long-format CSV and JSON sidecar that load_panel reads back."""
    path = Path(path)
    meta_path = Path(meta) if meta is not None else path.with_suffix(".json")
    c, i, t = np.meshgrid(
        np.arange(len(panel.countries)), np.arange(len(panel.indicators)), np.arange(len(panel.years)),
        indexing="ij",
    )
    df = pd.DataFrame({
        "country": np.asarray(panel.countries)[c.ravel()],
        "indicator": np.asarray(panel.indicator_ids)[i.ravel()],
        "year": np.asarray(panel.years)[t.ravel()],
        "value": panel.values.ravel(),
    })
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(panel_meta(panel), f, indent=2)
    return path, meta_path


# --- groups and summaries ---

def classify_groups(panel: IndicatorPanel, reference: str, early_members: Iterable[str] = ()) -> CountryGroups:
    """
    Partition countries into early members (1), richer than the reference (2),
    the reference itself (3) and the rest (4).
    """
    early = set(early_members)
    for country in [reference, *sorted(early)]:
        panel.country_index(country)
    early.discard(reference)

    ref_ipc = panel.ipc(reference)
    assignment = {}
    for country in panel.countries:
        if country == reference:
            assignment[country] = 3
        elif country in early:
            assignment[country] = 1
        elif panel.ipc(country) > ref_ipc:
            assignment[country] = 2
        else:
            assignment[country] = 4
    return CountryGroups(assignment)


def _year_slice(panel: IndicatorPanel, years) -> slice:
    if years is None:
        return slice(0, len(panel.years))
    start, end = years
    positions = [k for k, y in enumerate(panel.years) if start <= y <= end]
    if not positions:
        raise PanelError(f"year range {start}-{end} selects no panel years")
    return slice(positions[0], positions[-1] + 1)


def pillar_means(
    panel: IndicatorPanel,
    groups: CountryGroups,
    years: tuple[int, int] | None = None,
    which: Sequence[int] | None = None,
) -> pd.DataFrame:
    """
    Mean indicator level per pillar (rows) and country group (columns).

    Only non-empty groups are reported unless `which` names groups explicitly,
    in which case an empty one raises EmptyGroup.
    """
    span = _year_slice(panel, years)
    if which is None:
        which = [g for g in sorted(GROUP_LABELS) if groups.members(g)]
        if not which:
            raise EmptyGroup(0)
    pillars = panel.pillars
    table = {}
    for g in which:
        members = groups.members(g)
        if not members:
            raise EmptyGroup(g)
        rows = [panel.country_index(c) for c in members]
        block = panel.values[rows][:, :, span]
        table[g] = {
            int(p): float(block[:, pillars == p, :].mean()) for p in np.unique(pillars)
        }
    frame = pd.DataFrame(table)
    frame.index.name = "pillar"
    frame.columns.name = "group"
    return frame


def aggregate_by_pillar(panel: IndicatorPanel, vector, how: str = "sum") -> pd.Series:
    """Collapse a per-indicator vector onto the pillars (sum for shares, mean for levels)."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (len(panel.indicators),):
        raise PanelError(f"vector of length {vector.shape} does not match {len(panel.indicators)} indicators")
    series = pd.Series(vector, index=pd.Index(panel.pillars, name="pillar"))
    if how == "sum":
        return series.groupby(level=0).sum()
    if how == "mean":
        return series.groupby(level=0).mean()
    raise ValueError(f"unknown aggregation '{how}'")


def naive_profiles(panel: IndicatorPanel, country: str) -> pd.DataFrame:
    """Per-pillar initial levels, final levels and positive gaps for one country."""
    initial = panel.first(country)
    final = panel.last(country)
    return pd.DataFrame({
        "initial": aggregate_by_pillar(panel, initial, "mean"),
        "final": aggregate_by_pillar(panel, final, "mean"),
        "gap": aggregate_by_pillar(panel, np.maximum(0.0, final - initial), "mean"),
    })


def generate_synthetic_panel(
    n_countries: int,
    n_indicators: int,
    n_years: int,
    seed: int,
    start_year: int = 2006,
) -> IndicatorPanel:
    """
    Deterministic synthetic panel of bounded random walks.

    Roles go to the first three indicators; income per capita is lognormal and
    the budget fraction is uniform in [0.15, 0.45].
    """
    if n_countries < 2:
        raise DimensionTooSmall("n_countries", n_countries, 2)
    if n_indicators < 5:
        raise DimensionTooSmall("n_indicators", n_indicators, 5)
    if n_years < 2:
        raise DimensionTooSmall("n_years", n_years, 2)

    rng = np.random.default_rng(seed)
    start = rng.uniform(0.1, 0.6, size=(n_countries, n_indicators))
    drift = rng.uniform(0.0, 0.03, size=(n_countries, n_indicators))
    steps = drift[:, :, None] + rng.laplace(0.0, 0.015, size=(n_countries, n_indicators, n_years - 1))
    values = np.concatenate([start[:, :, None], start[:, :, None] + np.cumsum(steps, axis=2)], axis=2)
    values = np.clip(values, 0.0, 1.0)

    countries = tuple(f"C{k:02d}" for k in range(n_countries))
    indicators = tuple(Indicator(f"I{j:02d}", j % N_PILLARS + 1) for j in range(n_indicators))
    ipc = rng.lognormal(9.5, 0.6, size=n_countries)
    budget = rng.uniform(0.15, 0.45, size=n_countries)
    return IndicatorPanel(
        countries=countries,
        indicators=indicators,
        years=tuple(range(start_year, start_year + n_years)),
        values=values,
        roles={role: indicators[k].id for k, role in enumerate(ROLES)},
        country_meta={c: CountryMeta(float(ipc[k]), float(budget[k])) for k, c in enumerate(countries)},
        reference=countries[0],
    )


def register_panel(mcp):
    from ppi.formatting import format_markdown

    @mcp.tool()
    def summarize_panel(panel_path: str, meta_path: str | None = None) -> str:
        """Load and validate an indicator panel and summarize it by pillar and country group.

        Args:
            panel_path: Long-format CSV (country, indicator, year, value)
            meta_path: JSON sidecar with pillars, roles, income and budget per country
        """
        try:
            panel = load_panel(panel_path, meta_path)
        except Exception as e:
            return f"Unable to load panel: {e}"
        summary = {
            "shape": dict(zip(("countries", "indicators", "years"), panel.shape)),
            "years": f"{panel.years[0]}-{panel.years[-1]}",
            "roles": dict(panel.roles),
        }
        if panel.reference is not None:
            groups = classify_groups(panel, panel.reference, panel.early_members)
            means = pillar_means(panel, groups)
            summary["pillar means by group"] = {
                f"pillar {p}": {GROUP_LABELS[g]: round(v, 4) for g, v in row.items()}
                for p, row in means.iterrows()
            }
        return format_markdown(summary)
