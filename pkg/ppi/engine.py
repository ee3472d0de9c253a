"""Policy Priority Inference engine.

A central authority splits a budget B across N policy issues; each issue's
public servant decides how much of the allocation to contribute and how much
to divert; supervision catches diversion with probability driven by the
control-of-corruption indicator; indicators move toward their targets with
the contributions received directly and through the spillover network.

Symbols: ``initial`` is I_0, ``targets`` is T, ``budget`` is B, allocations P,
contributions C, benefits F, supervision outcomes theta.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ppi.errors import (
    ConfigError,
    InvalidContribution,
    MissingHistory,
    NonFiniteInput,
    OutOfRange,
)
from ppi.network import SpilloverNetwork

logger = logging.getLogger(__name__)

DEFAULT_BETA = 1.0
DEFAULT_EPSILON = 1e-2
DEFAULT_MAX_PERIODS = 10_000
SHARE_TOLERANCE = 1e-9
# Slack allowed when checking C <= P after floating-point arithmetic.
CONTRIBUTION_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class AllocationProfile:
    """Nonnegative shares over policy issues summing to one."""

    shares: np.ndarray

    def __post_init__(self):
        shares = np.array(self.shares, dtype=float)
        if shares.ndim != 1 or shares.size == 0:
            raise ValueError("an allocation profile is a non-empty vector")
        if not np.isfinite(shares).all() or (shares < 0).any():
            raise ValueError("allocation shares must be finite and nonnegative")
        if abs(shares.sum() - 1.0) > SHARE_TOLERANCE:
            raise ValueError(f"allocation shares sum to {shares.sum()}, not 1")
        shares.setflags(write=False)
        object.__setattr__(self, "shares", shares)

    @classmethod
    def normalized(cls, values) -> "AllocationProfile":
        values = np.asarray(values, dtype=float)
        return cls(values / values.sum())

    def __len__(self):
        return self.shares.size

    def __eq__(self, other):
        if not isinstance(other, AllocationProfile):
            return NotImplemented
        return np.array_equal(self.shares, other.shares)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    initial: np.ndarray
    targets: np.ndarray
    network: SpilloverNetwork
    gamma: float
    budget: float
    rl_index: int
    cc_index: int
    beta: float = DEFAULT_BETA
    epsilon: float = DEFAULT_EPSILON
    max_periods: int = DEFAULT_MAX_PERIODS
    seed: int = 0

    def __post_init__(self):
        n = self.network.n
        for name in ("initial", "targets"):
            v = np.array(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ConfigError(f"{name} has shape {v.shape}, network has {n} nodes")
            if not np.isfinite(v).all() or (v < 0).any() or (v > 1).any():
                raise ConfigError(f"{name} must lie in [0, 1]")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.budget <= 1:
            raise ConfigError(f"budget must lie in (0, 1], got {self.budget}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not np.isfinite(self.beta):
            raise ConfigError("beta must be finite")
        if int(self.max_periods) < 1:
            raise ConfigError("max_periods must be at least 1")
        for name in ("rl_index", "cc_index"):
            if not 0 <= getattr(self, name) < n:
                raise ConfigError(f"{name}={getattr(self, name)} outside 0..{n - 1}")

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.tolist(),
            "targets": self.targets.tolist(),
            "network": self.network.to_dict(),
            "gamma": self.gamma,
            "budget": self.budget,
            "rl_index": self.rl_index,
            "cc_index": self.cc_index,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "max_periods": self.max_periods,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimulationConfig":
        n = len(data["initial"])
        network = (
            SpilloverNetwork.from_dict(data["network"]) if "network" in data
            else SpilloverNetwork.isolated(n)
        )
        return cls(
            initial=np.asarray(data["initial"], dtype=float),
            targets=np.asarray(data["targets"], dtype=float),
            network=network,
            gamma=float(data["gamma"]),
            budget=float(data["budget"]),
            rl_index=int(data["rl_index"]),
            cc_index=int(data["cc_index"]),
            beta=float(data.get("beta", DEFAULT_BETA)),
            epsilon=float(data.get("epsilon", DEFAULT_EPSILON)),
            max_periods=int(data.get("max_periods", DEFAULT_MAX_PERIODS)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class AgentState:
    """Two lags of contributions and benefits plus the last supervision outcome."""

    c_prev: np.ndarray | None
    c_prev2: np.ndarray | None
    f_prev: np.ndarray | None
    f_prev2: np.ndarray | None
    theta: np.ndarray

    def shift(self, contribution: np.ndarray, benefit_: np.ndarray, theta: np.ndarray) -> None:
        self.c_prev2, self.c_prev = self.c_prev, contribution
        self.f_prev2, self.f_prev = self.f_prev, benefit_
        self.theta = theta


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    """
    Per-period record of one run. ``indicators`` has one more row than the
    other arrays: row 0 is the initial state.
    """

    indicators: np.ndarray
    allocations: np.ndarray
    contributions: np.ndarray
    supervision: np.ndarray
    initial_allocation: np.ndarray
    budget: float
    converged: bool

    @property
    def periods(self) -> int:
        return self.allocations.shape[0]

    @property
    def corruption(self) -> float:
        """Accumulated diversion normalized by N * B."""
        n = self.initial_allocation.size
        return float((self.allocations - self.contributions).sum() / (n * self.budget))

    @property
    def profile(self) -> np.ndarray:
        """Time-averaged allocation shares; the bootstrap allocation when no period ran."""
        if self.periods == 0:
            return self.initial_allocation / self.budget
        return self.allocations.mean(axis=0) / self.budget

    def __eq__(self, other):
        if not isinstance(other, SimulationTrace):
            return NotImplemented
        return (
            self.converged == other.converged
            and self.budget == other.budget
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("indicators", "allocations", "contributions", "supervision", "initial_allocation")
            )
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "periods": self.periods,
            "converged": self.converged,
            "corruption": self.corruption,
            "initial": self.indicators[0].tolist(),
            "trace": [
                {
                    "I": self.indicators[t + 1].tolist(),
                    "P": self.allocations[t].tolist(),
                    "C": self.contributions[t].tolist(),
                    "theta": self.supervision[t].tolist(),
                }
                for t in range(self.periods)
            ],
        }


@dataclass(frozen=True, eq=False)
class ProfileSample:
    """Monte Carlo estimate of an allocation profile with every run kept."""

    mean: AllocationProfile
    runs: np.ndarray
    periods: np.ndarray
    corruption: np.ndarray
    converged: np.ndarray

    @property
    def n_runs(self) -> int:
        return self.runs.shape[0]

    def run_profiles(self) -> list[AllocationProfile]:
        return [AllocationProfile.normalized(r) for r in self.runs]


# --- model equations ---

def governance_map(level: float) -> float:
    """Map a governance indicator in [0, 1] to a probability: level / e^(1 - level)."""
    level = float(level)
    if not np.isfinite(level) or not 0.0 <= level <= 1.0:
        raise OutOfRange(f"governance level {level} outside [0, 1]")
    return level / np.exp(1.0 - level)


def allocate(gaps, degrees, theta, f_r: float, budget: float) -> np.ndarray:
    """
    Split the budget in proportion to q_i = max(0, T_i - I_i) (K_i + 1) (1 - theta_i f_R).

    When every propensity is zero the budget goes uniformly to issues with a
    positive gap, or to all issues if none has one.
    """
    gaps = np.asarray(gaps, dtype=float)
    degrees = np.asarray(degrees, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if not (np.isfinite(gaps).all() and np.isfinite(degrees).all() and np.isfinite(theta).all()
            and np.isfinite(f_r) and np.isfinite(budget)):
        raise NonFiniteInput("allocation inputs must be finite")
    if budget <= 0:
        raise ConfigError(f"budget must be positive, got {budget}")

    positive = np.maximum(gaps, 0.0)
    q = positive * (degrees + 1.0) * (1.0 - theta * f_r)
    total = q.sum()
    if total > 0:
        shares = q / total
    elif (positive > 0).any():
        shares = (positive > 0) / np.count_nonzero(positive)
    else:
        shares = np.full(gaps.size, 1.0 / gaps.size)
    return shares * budget


def sample_supervision(allocations, contributions, f_c: float, rng: np.random.Generator) -> np.ndarray:
    """
    Draw theta_i = 1 with probability f_C (P_i - C_i) / sum_j (P_j - C_j).

    One uniform is drawn per node on every call, including when nothing is
    diverted.
    """
    allocations = np.asarray(allocations, dtype=float)
    contributions = np.asarray(contributions, dtype=float)
    diversion = allocations - contributions
    if (diversion < -CONTRIBUTION_SLACK).any() or (contributions < 0).any():
        k = int(np.argmax((diversion < -CONTRIBUTION_SLACK) | (contributions < 0)))
        raise InvalidContribution(k, float(contributions[k]), float(allocations[k]))
    diversion = np.maximum(diversion, 0.0)
    total = diversion.sum()
    probabilities = f_c * diversion / total if total > 0 else np.zeros_like(diversion)
    return (rng.random(diversion.size) < probabilities).astype(int)


def benefit(indicator, allocation, contribution, theta, f_r: float):
    """F = (I + P - C)(1 - theta f_R)."""
    return (np.asarray(indicator) + allocation - contribution) * (1.0 - np.asarray(theta) * f_r)


def update_contribution(state: AgentState, allocation) -> np.ndarray:
    """C_t = clamp(C_{t-1} + sgn(dF dC) |dF| (C_{t-1} + C_{t-2}) / 2, 0, P_t)."""
    if any(v is None for v in (state.c_prev, state.c_prev2, state.f_prev, state.f_prev2)):
        raise MissingHistory("contribution update needs two periods of history")
    delta_f = state.f_prev - state.f_prev2
    delta_c = state.c_prev - state.c_prev2
    direction = np.sign(delta_f * delta_c)
    proposal = state.c_prev + direction * np.abs(delta_f) * (state.c_prev + state.c_prev2) / 2.0
    return np.minimum(np.asarray(allocation, dtype=float), np.maximum(0.0, proposal))


def step_indicators(indicators, contributions, config: SimulationConfig) -> np.ndarray:
    """
    I_t = clamp(I_{t-1} + gamma max(0, T - I_{t-1}) (C + beta sum_j C_j A[j, i]), 0, 1).

    Indicators at or above their target are left where they are.
    """
    indicators = np.asarray(indicators, dtype=float)
    contributions = np.asarray(contributions, dtype=float)
    gap = np.maximum(config.targets - indicators, 0.0)
    received = contributions + config.beta * (contributions @ config.network.adjacency)
    return np.clip(indicators + config.gamma * gap * received, 0.0, 1.0)


def _max_gap(indicators: np.ndarray, targets: np.ndarray) -> float:
    return float(np.max(np.maximum(targets - indicators, 0.0)))


# --- runs ---

def run_simulation(config: SimulationConfig) -> SimulationTrace:
    """
    Simulate until every positive gap is within epsilon or max_periods is hit.

    Bootstrap: P_0 is allocated with theta = 0; two lagged contributions are
    drawn uniformly in [0, P_0] and their benefits use theta = 0. Each period
    then allocates, updates contributions, samples supervision, moves the
    indicators and records benefits, in that order.
    """
    rng = np.random.default_rng(config.seed)
    n = config.network.n
    degrees = config.network.degrees
    targets = config.targets
    indicators = config.initial.copy()

    f_r = governance_map(indicators[config.rl_index])
    no_theta = np.zeros(n, dtype=int)
    p0 = allocate(targets - indicators, degrees, no_theta, f_r, config.budget)

    empty = np.empty((0, n))
    if _max_gap(indicators, targets) <= config.epsilon:
        return SimulationTrace(
            indicators[None, :], empty, empty, empty.astype(int), p0, config.budget, True
        )

    c_prev2 = rng.uniform(0.0, p0)
    c_prev = rng.uniform(0.0, p0)
    state = AgentState(
        c_prev=c_prev,
        c_prev2=c_prev2,
        f_prev=benefit(indicators, p0, c_prev, no_theta, f_r),
        f_prev2=benefit(indicators, p0, c_prev2, no_theta, f_r),
        theta=no_theta,
    )

    history_i = [indicators]
    history_p, history_c, history_theta = [], [], []
    converged = False
    for _ in range(int(config.max_periods)):
        f_r = governance_map(indicators[config.rl_index])
        f_c = governance_map(indicators[config.cc_index])
        allocations = allocate(targets - indicators, degrees, state.theta, f_r, config.budget)
        contributions = update_contribution(state, allocations)
        theta = sample_supervision(allocations, contributions, f_c, rng)
        indicators = step_indicators(indicators, contributions, config)
        state.shift(contributions, benefit(indicators, allocations, contributions, theta, f_r), theta)

        history_i.append(indicators)
        history_p.append(allocations)
        history_c.append(contributions)
        history_theta.append(theta)
        if _max_gap(indicators, targets) <= config.epsilon:
            converged = True
            break

    if not converged:
        logger.debug("run with seed %s stopped at max_periods=%d", config.seed, config.max_periods)
    return SimulationTrace(
        indicators=np.array(history_i),
        allocations=np.array(history_p),
        contributions=np.array(history_c),
        supervision=np.array(history_theta, dtype=int),
        initial_allocation=p0,
        budget=config.budget,
        converged=converged,
    )


def run_seeds(master_seed: int, n_runs: int) -> list[int]:
    """Independent per-run seeds derived from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n_runs)
    return [int(child.generate_state(1)[0]) for child in children]


def expected_profile(config: SimulationConfig, n_runs: int, master_seed: int) -> ProfileSample:
    """Monte Carlo allocation profile: mean of per-run time-averaged shares."""
    if n_runs < 1:
        raise ConfigError(f"n_runs must be at least 1, got {n_runs}")
    traces = [run_simulation(config.replace(seed=s)) for s in run_seeds(master_seed, n_runs)]
    runs = np.array([t.profile for t in traces])
    converged = np.array([t.converged for t in traces])
    if not converged.all():
        logger.warning("%d of %d runs did not converge within %d periods",
                       int((~converged).sum()), n_runs, config.max_periods)
    return ProfileSample(
        mean=AllocationProfile.normalized(runs.mean(axis=0)),
        runs=runs,
        periods=np.array([t.periods for t in traces]),
        corruption=np.array([t.corruption for t in traces]),
        converged=converged,
    )


def register_engine(mcp):
    import json

    from ppi.formatting import format_markdown

    @mcp.tool()
    def simulate(config_path: str, runs: int = 100, seed: int = 0) -> str:
        """Run Monte Carlo simulations of the allocation game from a JSON config.

        Args:
            config_path: JSON with initial, targets, network, gamma, budget, rl_index, cc_index
            runs: Number of Monte Carlo runs
            seed: Master seed for the runs
        """
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                config = SimulationConfig.from_dict(json.load(f))
            sample = expected_profile(config, runs, seed)
        except Exception as e:
            return f"Unable to simulate: {e}"
        labels = config.network.labels
        order = np.argsort(-sample.mean.shares, kind="stable")
        return format_markdown({
            "simulation": {
                "runs": runs,
                "converged runs": int(sample.converged.sum()),
                "mean periods": float(sample.periods.mean()),
                "mean corruption": float(sample.corruption.mean()),
            },
            "allocation profile": {labels[k]: float(sample.mean.shares[k]) for k in order},
        })
