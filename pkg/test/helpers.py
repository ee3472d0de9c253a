import numpy as np

from ppi.network import SpilloverNetwork
from ppi.panel import ROLES, CountryMeta, Indicator, IndicatorPanel


class MockMCP:
    """Stand-in for FastMCP that keeps registered tool functions callable."""

    def __init__(self):
        self.tools = {}

    def tool(self, *args, **kwargs):
        def decorator(func):
            self.tools[func.__name__] = func
            return func
        return decorator


def build_panel(values, countries=None, pillars=None, ipc=None, budget=None, reference=None, early=()):
    """Panel from a countries x indicators x years array; roles go to the first three indicators."""
    values = np.asarray(values, dtype=float)
    n_c, n_i, n_t = values.shape
    countries = countries or [f"C{k}" for k in range(n_c)]
    pillars = pillars or [j % 13 + 1 for j in range(n_i)]
    ipc = ipc or [1000.0 * (k + 1) for k in range(n_c)]
    budget = budget or [0.3] * n_c
    indicators = [Indicator(f"I{j}", pillars[j]) for j in range(n_i)]
    return IndicatorPanel(
        countries=tuple(countries),
        indicators=tuple(indicators),
        years=tuple(range(2006, 2006 + n_t)),
        values=values,
        roles={role: indicators[k].id for k, role in enumerate(ROLES)},
        country_meta={c: CountryMeta(ipc[k], budget[k]) for k, c in enumerate(countries)},
        reference=reference,
        early_members=tuple(early),
    )


def line_network(n, weight=0.5):
    """0 -> 1 -> ... -> n-1 with a constant weight."""
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = weight
    return SpilloverNetwork(a)


