"""Spillover-network estimation.

Two steps per country: a triangulated maximally filtered graph (TMFG) keeps the
3(N-2) strongest planar links of the correlation matrix of first differences,
then a pairwise likelihood-ratio statistic orients every kept link.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import networkx as nx
import numpy as np
from scipy import stats

from ppi.errors import DegenerateInput, NetworkError, TooFewNodes, TooFewYears, ZeroVariance

logger = logging.getLogger(__name__)

# 4-cliques scored per vectorized batch when seeding the TMFG.
SEED_CHUNK = 200_000


@dataclass(frozen=True, eq=False)
class SpilloverNetwork:
    """Weighted directed network; adjacency[i, j] != 0 is an edge i -> j."""

    adjacency: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NetworkError(f"adjacency must be square, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise NetworkError("adjacency has non-finite weights")
        if np.any(np.diag(a) != 0):
            raise NetworkError("adjacency has self-loops")
        if np.any((a != 0) & (a.T != 0)):
            raise NetworkError("a pair of nodes carries edges in both directions")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        labels = tuple(self.labels) or tuple(str(i) for i in range(a.shape[0]))
        if len(labels) != a.shape[0]:
            raise NetworkError(f"{len(labels)} labels for {a.shape[0]} nodes")
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other):
        if not isinstance(other, SpilloverNetwork):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.adjacency, other.adjacency)

    __hash__ = None

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        """Incident edges per node, in or out."""
        nz = self.adjacency != 0
        return nz.sum(axis=1) + nz.sum(axis=0)

    def edges(self) -> list[tuple[int, int, float]]:
        src, tgt = np.nonzero(self.adjacency)
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(src, tgt)]

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.labels)
        g.add_weighted_edges_from((self.labels[i], self.labels[j], w) for i, j, w in self.edges())
        return g

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.labels),
            "edges": [
                {"source": self.labels[i], "target": self.labels[j], "weight": w}
                for i, j, w in self.edges()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SpilloverNetwork":
        labels = tuple(data["nodes"])
        pos = {label: k for k, label in enumerate(labels)}
        a = np.zeros((len(labels), len(labels)))
        for edge in data["edges"]:
            a[pos[edge["source"]], pos[edge["target"]]] = float(edge["weight"])
        return cls(a, labels)

    @classmethod
    def isolated(cls, n: int, labels: Iterable[str] = ()) -> "SpilloverNetwork":
        return cls(np.zeros((n, n)), tuple(labels))


class Orientation(NamedTuple):
    forward: bool
    weight: float
    statistic: float


def first_differences(series) -> np.ndarray:
    """Row t is the change from year t to year t + 1 for every indicator."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 2:
        raise DegenerateInput(f"expected a years x indicators matrix, got {series.ndim} dimensions")
    if series.shape[0] < 3:
        raise TooFewYears(series.shape[0])
    return np.diff(series, axis=0)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise DegenerateInput("pearson correlation needs two equal-length series of at least 2 values")
    if np.ptp(x) == 0:
        raise ZeroVariance("first series")
    if np.ptp(y) == 0:
        raise ZeroVariance("second series")
    return float(stats.pearsonr(x, y)[0])


def similarity_matrix(diffs) -> np.ndarray:
    """Pearson correlations between columns; constant columns correlate 0 with the rest."""
    diffs = np.asarray(diffs, dtype=float)
    if diffs.ndim != 2 or diffs.shape[0] < 2:
        raise DegenerateInput("similarity needs at least 2 rows of differences")
    varying = np.ptp(diffs, axis=0) > 0
    centered = diffs - diffs.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    norms[~varying] = 1.0
    corr = (centered.T @ centered) / np.outer(norms, norms)
    corr[~varying, :] = 0.0
    corr[:, ~varying] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def _seed_clique(scores: np.ndarray) -> tuple[int, int, int, int]:
    """Exhaustive argmax over all 4-cliques, scored in chunks; the first maximum wins."""
    n = scores.shape[0]
    quads_iter = itertools.combinations(range(n), 4)
    pairs = list(itertools.combinations(range(4), 2))
    best, best_total = None, -np.inf
    while True:
        flat = np.fromiter(
            itertools.chain.from_iterable(itertools.islice(quads_iter, SEED_CHUNK)), dtype=int
        )
        if flat.size == 0:
            break
        quads = flat.reshape(-1, 4)
        total = np.zeros(len(quads))
        for a, b in pairs:
            total += scores[quads[:, a], quads[:, b]]
        k = int(np.argmax(total))
        if total[k] > best_total:
            best, best_total = quads[k], total[k]
    return tuple(int(v) for v in best)


def tmfg_filter(weights, score: str = "abs") -> list[tuple[int, int]]:
    """
    Greedy triangulated maximally filtered graph.

    Seeds with the highest-scoring 4-clique, then repeatedly inserts the
    unplaced vertex with the largest gain into a triangular face.

    Returns:
        Sorted list of undirected edges (i, j), i < j, of length 3(N - 2).
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DegenerateInput(f"weights must be square, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise DegenerateInput("weights contain non-finite values")
    n = w.shape[0]
    if n < 3:
        raise TooFewNodes(n)
    if n == 3:
        return [(0, 1), (0, 2), (1, 2)]

    if score == "abs":
        s = np.abs(w)
    elif score == "signed":
        s = w.copy()
    else:
        raise ValueError(f"unknown score '{score}'")
    s = (s + s.T) / 2.0
    np.fill_diagonal(s, 0.0)

    seed = _seed_clique(s)
    edges = {tuple(sorted(pair)) for pair in itertools.combinations(seed, 2)}
    faces = [tuple(sorted(f)) for f in itertools.combinations(seed, 3)]
    remaining = [v for v in range(n) if v not in seed]

    while remaining:
        f = np.array(faces)
        r = np.array(remaining)
        gains = s[f[:, 0]][:, r] + s[f[:, 1]][:, r] + s[f[:, 2]][:, r]
        fi, vi = divmod(int(np.argmax(gains)), len(remaining))
        v = remaining.pop(vi)
        a, b, c = faces[fi]
        edges.update({tuple(sorted((a, v))), tuple(sorted((b, v))), tuple(sorted((c, v)))})
        faces[fi] = tuple(sorted((a, b, v)))
        faces.append(tuple(sorted((a, c, v))))
        faces.append(tuple(sorted((b, c, v))))

    return sorted(edges)


def is_planar(edges: Iterable[tuple[int, int]] | nx.Graph) -> bool:
    """Planarity of an edge list or of a graph, ignoring edge direction."""
    graph = edges.to_undirected(as_view=True) if isinstance(edges, nx.Graph) else nx.Graph(list(edges))
    planar, _ = nx.check_planarity(graph)
    return planar


def orient_edge(x, y) -> Orientation:
    """
    Pairwise likelihood-ratio orientation of a linear non-Gaussian link.

    R = rho * mean(x * tanh(y) - tanh(x) * y) on standardized series; R > 0
    means x -> y, R < 0 means y -> x, and R = 0 resolves to x -> y, so callers
    pass the lower-index series first.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInput("orientation needs two equal-length 1-D series")
    if x.size < 3:
        raise DegenerateInput("orientation needs at least 3 observations")
    if np.ptp(x) == 0:
        raise ZeroVariance("first series")
    if np.ptp(y) == 0:
        raise ZeroVariance("second series")

    xs = (x - x.mean()) / x.std()
    ys = (y - y.mean()) / y.std()
    rho = pearson(x, y)
    statistic = rho * float(np.mean(xs * np.tanh(ys) - np.tanh(xs) * ys))
    return Orientation(statistic >= 0.0, rho, statistic)


def network_from_differences(diffs, labels: Iterable[str] = (), score: str = "abs") -> SpilloverNetwork:
    diffs = np.asarray(diffs, dtype=float)
    corr = similarity_matrix(diffs)
    adjacency = np.zeros_like(corr)
    dropped = []
    for i, j in tmfg_filter(corr, score):
        weight = corr[i, j]
        if weight == 0.0:
            dropped.append((i, j))
            continue
        if orient_edge(diffs[:, i], diffs[:, j]).forward:
            adjacency[i, j] = weight
        else:
            adjacency[j, i] = weight
    if dropped:
        logger.warning(
            "dropped %d zero-correlation TMFG links (constant indicators?): %s",
            len(dropped), ", ".join(f"({i}, {j})" for i, j in dropped),
        )
    return SpilloverNetwork(adjacency, tuple(labels))


def estimate_network(panel, country: str, pool: Iterable[str] = (), score: str = "abs") -> SpilloverNetwork:
    """
    Estimate one country's spillover network from its own indicator series.

    Args:
        panel: IndicatorPanel holding the series
        country: country whose network is estimated
        pool: other countries whose difference rows are stacked under the
            country's own before correlating
        score: TMFG score, "abs" (default) or "signed" correlation
    """
    blocks = [first_differences(panel.series(country))]
    blocks.extend(first_differences(panel.series(other)) for other in pool if other != country)
    network = network_from_differences(np.vstack(blocks), panel.indicator_ids, score)
    logger.info("estimated network for %s: %d edges", country, len(network.edges()))
    return network


def estimate_networks(panel, countries: Iterable[str] | None = None, score: str = "abs") -> dict[str, SpilloverNetwork]:
    countries = list(countries) if countries is not None else list(panel.countries)
    return {c: estimate_network(panel, c, score=score) for c in countries}


def register_network(mcp):
    from ppi.formatting import format_markdown
    from ppi.panel import load_panel

    @mcp.tool()
    def estimate_spillover_network(
        panel_path: str,
        country: str,
        meta_path: str | None = None,
        pool: list[str] | None = None,
        top: int = 10,
    ) -> str:
        """Estimate a country's directed spillover network between policy issues.

        Args:
            panel_path: Long-format indicator CSV
            country: Country code whose network is estimated
            meta_path: JSON sidecar (defaults to the CSV path with .json)
            pool: Optional structurally similar countries whose series are pooled
            top: Number of strongest edges to list
        """
        try:
            panel = load_panel(panel_path, meta_path)
            network = estimate_network(panel, country, pool or ())
        except Exception as e:
            return f"Unable to estimate network: {e}"
        edges = sorted(network.edges(), key=lambda e: -abs(e[2]))[:top]
        degrees = network.degrees
        return format_markdown({
            "network": {
                "country": country,
                "nodes": network.n,
                "edges": len(network.edges()),
                "negative edges": sum(1 for _, _, w in network.edges() if w < 0),
                "planar": is_planar(network.to_networkx()),
            },
            "strongest edges": [
                f"{network.labels[i]} -> {network.labels[j]}: {w:+.3f}" for i, j, w in edges
            ],
            "most connected": [
                f"{network.labels[k]}: {int(degrees[k])}" for k in np.argsort(-degrees, kind="stable")[:top]
            ],
        })
