"""Exception hierarchy shared by every stage of the pipeline."""


class PPIError(ValueError):
    """Base class for all pipeline errors."""


class ZeroVariance(PPIError):
    def __init__(self, what: str = "series"):
        super().__init__(f"{what} has zero variance")
        self.what = what


# --- panel ---

class PanelError(PPIError):
    pass


class MalformedFile(PanelError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ValueOutOfRange(PanelError):
    def __init__(self, country: str, indicator: str, year: int, value: float):
        super().__init__(
            f"value {value!r} for ({country}, {indicator}, {year}) is outside [0, 1]"
        )
        self.country = country
        self.indicator = indicator
        self.year = year
        self.value = value


class MissingRole(PanelError):
    def __init__(self, role: str):
        super().__init__(f"no indicator mapped to role '{role}'")
        self.role = role


class UnknownCountry(PanelError):
    def __init__(self, country: str):
        super().__init__(f"unknown country '{country}'")
        self.country = country


class EmptyGroup(PanelError):
    def __init__(self, group: int):
        super().__init__(f"country group {group} has no members")
        self.group = group


class DimensionTooSmall(PanelError):
    def __init__(self, name: str, value: int, minimum: int):
        super().__init__(f"{name}={value} is below the minimum of {minimum}")
        self.name = name
        self.value = value
        self.minimum = minimum


# --- network ---

class NetworkError(PPIError):
    pass


class TooFewYears(NetworkError):
    def __init__(self, years: int, minimum: int = 3):
        super().__init__(f"{years} years of data, at least {minimum} required")
        self.years = years


class DegenerateInput(NetworkError):
    pass


class TooFewNodes(NetworkError):
    def __init__(self, n: int):
        super().__init__(f"{n} nodes, at least 3 required")
        self.n = n


# --- engine ---

class EngineError(PPIError):
    pass


class ConfigError(EngineError):
    pass


class OutOfRange(EngineError):
    pass


class NonFiniteInput(EngineError):
    pass


class InvalidContribution(EngineError):
    def __init__(self, node: int, contribution: float, allocation: float):
        super().__init__(
            f"node {node}: contribution {contribution} exceeds allocation {allocation}"
        )
        self.node = node


class MissingHistory(EngineError):
    pass


# --- calibration ---

class CalibrationError(PPIError):
    pass


class NoNetwork(CalibrationError):
    def __init__(self, country: str):
        super().__init__(f"no spillover network for '{country}'")
        self.country = country


class SearchBoundsInvalid(CalibrationError):
    def __init__(self, lo: float, hi: float):
        super().__init__(f"invalid gamma search bounds [{lo}, {hi}]")
        self.lo = lo
        self.hi = hi


# --- coherence ---

class CoherenceError(PPIError):
    pass


class UnknownMode(CoherenceError):
    def __init__(self, mode: str):
        super().__init__(f"unknown development mode '{mode}'")
        self.mode = mode


class DegenerateVector(CoherenceError):
    pass


class UndefinedIndex(CoherenceError):
    pass


class RunCountMismatch(CoherenceError):
    def __init__(self, n_p: int, n_q: int):
        super().__init__(f"{n_p} retrospective runs but {n_q} consistent runs")


# --- analysis ---

class AnalysisError(PPIError):
    pass


class TooFewModes(AnalysisError):
    def __init__(self, n: int):
        super().__init__(f"{n} modes with averages, at least 3 required")


class MissingCell(AnalysisError):
    def __init__(self, country: str, mode: str):
        super().__init__(f"grid has no cell for country '{country}', mode '{mode}'")
        self.country = country
        self.mode = mode


class EmptyGrid(AnalysisError):
    pass


class IoError(AnalysisError):
    def __init__(self, path, reason: str):
        super().__init__(f"cannot write {path}: {reason}")
        self.path = path
