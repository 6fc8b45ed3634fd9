from datetime import datetime
from enum import IntEnum
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import Config

STRATUM_ALL = "all"
STRATUM_WITHIN = "within"
STRATUM_BETWEEN = "between"


def _check_probability(value: float, name: str) -> float:
    if not 0.0 <= value < 1.0:
        raise ValueError(f"{name} must lie in [0, 1), got {value}")
    return value


class ExposureCondition(IntEnum):
    """Joint direct/indirect exposure of a subject (index = 2*own + any_treated_influencer)"""
    NO_EXPOSURE = 0
    INDIRECT_EXPOSURE = 1
    DIRECT_EXPOSURE = 2
    FULL_EXPOSURE = 3

    @property
    def label(self) -> str:
        return CONDITION_LABELS[self]

    @classmethod
    def from_parts(cls, treated: int, exposed: int) -> "ExposureCondition":
        return cls(2 * int(treated) + int(exposed))


CONDITION_LABELS = ("NoExposure", "IndirectExposure", "DirectExposure", "FullExposure")


def _match_stratum_labels(explicit, derived) -> Dict[str, str]:
    """Map file labels (e.g. in_village/out_village) one-to-one onto within/between"""
    mapping: Dict[str, str] = {}
    for labels, implied in zip(explicit, derived):
        for label, stratum in zip(labels, implied):
            if mapping.setdefault(label, stratum) != stratum:
                raise ValueError(f"edge_stratum label '{label}' covers both within- and between-group edges")
    for label, stratum in mapping.items():
        if label in (STRATUM_WITHIN, STRATUM_BETWEEN) and label != stratum:
            raise ValueError("edge_stratum disagrees with the strata implied by node_group")
    if len(set(mapping.values())) != len(mapping):
        raise ValueError("edge_stratum uses two labels for the same group stratum")
    return mapping


class DirectedGraph(BaseModel):
    """Influence network; in_neighbors[i] lists the sources of edges j -> i"""
    model_config = ConfigDict(frozen=True)

    n_nodes: int = Field(gt=0, description="Number of nodes, indexed 0..n_nodes-1")
    in_neighbors: Tuple[Tuple[int, ...], ...] = Field(description="Sorted in-neighbour indices per node")
    edge_stratum: Optional[Tuple[Tuple[str, ...], ...]] = Field(
        default=None, description="Label of each in-edge, aligned with in_neighbors"
    )
    node_group: Optional[Tuple[str, ...]] = Field(
        default=None, description="Group label per node (e.g. village); defines within/between strata"
    )

    @model_validator(mode="before")
    @classmethod
    def _normalise(cls, data):
        if not isinstance(data, dict):
            return data
        neighbors = [list(row) for row in data.get("in_neighbors", ())]
        strata = data.get("edge_stratum")
        groups = data.get("node_group")
        if strata is not None:
            strata = [list(row) for row in strata]
            if len(strata) != len(neighbors) or any(len(a) != len(b) for a, b in zip(strata, neighbors)):
                raise ValueError("edge_stratum must label every edge exactly once")
        sorted_neighbors, sorted_strata = [], []
        for i, row in enumerate(neighbors):
            order = sorted(range(len(row)), key=lambda k: int(row[k]))
            sorted_neighbors.append(tuple(int(row[k]) for k in order))
            if strata is not None:
                sorted_strata.append(tuple(str(strata[i][k]) for k in order))
        data = dict(data)
        data["in_neighbors"] = tuple(sorted_neighbors)
        if groups is not None:
            groups = tuple(str(g) for g in groups)
            data["node_group"] = groups
            if len(groups) == len(sorted_neighbors):
                derived = tuple(
                    tuple(STRATUM_WITHIN if groups[j] == groups[i] else STRATUM_BETWEEN for j in row)
                    for i, row in enumerate(sorted_neighbors)
                )
                if strata is not None:
                    _match_stratum_labels(sorted_strata, derived)
                sorted_strata = list(derived)
                strata = sorted_strata
        data["edge_stratum"] = tuple(sorted_strata) if strata is not None else None
        return data

    @model_validator(mode="after")
    def _check_invariants(self):
        if len(self.in_neighbors) != self.n_nodes:
            raise ValueError(f"in_neighbors has {len(self.in_neighbors)} rows for {self.n_nodes} nodes")
        for i, row in enumerate(self.in_neighbors):
            if len(set(row)) != len(row):
                raise ValueError(f"duplicate in-neighbour of node {i}")
            for j in row:
                if not 0 <= j < self.n_nodes:
                    raise ValueError(f"node index {j} out of range [0, {self.n_nodes})")
                if j == i:
                    raise ValueError(f"self-loop at node {i}")
        if self.node_group is not None and len(self.node_group) != self.n_nodes:
            raise ValueError("node_group must label every node")
        return self

    @property
    def n_edges(self) -> int:
        return sum(len(row) for row in self.in_neighbors)

    def pair_stratum(self, src: int, dst: int) -> str:
        if self.node_group is None:
            raise ValueError("pair strata require node_group")
        return STRATUM_WITHIN if self.node_group[src] == self.node_group[dst] else STRATUM_BETWEEN


class CorruptionSpec(BaseModel):
    """How an observed network is produced from the true one"""
    p: float = Field(default=0.0, description="Probability each true edge is dropped")
    q: float = Field(default=0.0, description="Probability each non-edge is added")
    q_mode: Literal["absolute", "density_scaled"] = Field(default="absolute")
    per_stratum: Optional[Dict[str, Tuple[float, float]]] = Field(
        default=None, description="Stratum label -> (p, q)"
    )

    @field_validator("p", "q")
    @classmethod
    def _probability(cls, value, info):
        return _check_probability(value, info.field_name)

    @field_validator("per_stratum")
    @classmethod
    def _strata_probabilities(cls, value):
        if value is not None:
            for label, (p, q) in value.items():
                _check_probability(p, f"p[{label}]")
                _check_probability(q, f"q[{label}]")
        return value

    def for_stratum(self, label: Optional[str]) -> Tuple[float, float]:
        if self.per_stratum is not None and label is not None:
            if label not in self.per_stratum:
                raise ValueError(f"no corruption parameters for stratum '{label}'")
            return self.per_stratum[label]
        return self.p, self.q


class ExperimentDesign(BaseModel):
    """Treatment vector, assignment probability and outcomes for one network"""
    model_config = ConfigDict(frozen=True)

    treatment: Tuple[int, ...] = Field(description="0/1 treatment per node")
    assign_prob: float = Field(gt=0.0, lt=1.0, description="Bernoulli assignment probability")
    outcomes: Tuple[float, ...] = Field(description="Observed outcome per node")

    @model_validator(mode="after")
    def _check(self):
        if len(self.treatment) != len(self.outcomes):
            raise ValueError("treatment and outcomes must have the same length")
        if any(t not in (0, 1) for t in self.treatment):
            raise ValueError("treatment entries must be 0 or 1")
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.treatment)

    def t(self) -> np.ndarray:
        return np.asarray(self.treatment, dtype=np.int64)

    def y(self) -> np.ndarray:
        return np.asarray(self.outcomes, dtype=float)


class BetaBinomialPrior(BaseModel):
    """Beta-binomial law over a latent connection count"""
    model_config = ConfigDict(frozen=True)

    mu: float = Field(ge=0.0, le=1.0, description="Mean link propensity")
    rho: float = Field(default=0.0, ge=0.0, lt=1.0, description="Overdispersion (intra-class correlation)")
    size: int = Field(ge=0, description="Number of candidate influencers")
    underdispersed: bool = Field(default=False, description="Moment matching clamped rho at 0")

    def resized(self, size: int) -> "BetaBinomialPrior":
        return self if size == self.size else self.model_copy(update={"size": int(size)})


class PriorConfig(BaseModel):
    """How the degree prior is chosen for each network (and stratum)"""
    model_config = ConfigDict(extra="forbid")

    mu: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    rho: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    mode: Literal["density", "empirical"] = Field(default="empirical")
    strata: Optional[Dict[str, "PriorConfig"]] = Field(default=None, description="Per-stratum overrides")

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "density" and self.mu is None and not self.strata:
            raise ValueError("prior mode 'density' needs mu")
        return self

    def for_stratum(self, label: str) -> "PriorConfig":
        if self.strata and label in self.strata:
            return self.strata[label]
        return self


PriorConfig.model_rebuild()


class MismeasureParams(BaseModel):
    """Edge-drop probability p and false-edge probability q"""
    model_config = ConfigDict(frozen=True)

    p: float = Field(description="Probability a true edge is unobserved")
    q: float = Field(description="Probability a non-edge is observed")
    per_stratum: Optional[Dict[str, Tuple[float, float]]] = Field(default=None)

    @field_validator("p", "q")
    @classmethod
    def _probability(cls, value, info):
        return _check_probability(value, info.field_name)

    @field_validator("per_stratum")
    @classmethod
    def _strata_probabilities(cls, value):
        if value is not None:
            for label, (p, q) in value.items():
                _check_probability(p, f"p[{label}]")
                _check_probability(q, f"q[{label}]")
        return value

    def for_stratum(self, label: str) -> Tuple[float, float]:
        if self.per_stratum is not None and label in self.per_stratum:
            return self.per_stratum[label]
        return self.p, self.q


class GaussianLinear(BaseModel):
    """y ~ N(alpha_c + beta_c d, sigma2) with variance shared across conditions"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["gaussian"] = "gaussian"
    alpha: Tuple[float, float, float, float]
    beta: Tuple[float, float, float, float]
    sigma2: float = Field(gt=0.0)


class BinomialLogit(BaseModel):
    """y ~ Bin(trials, expit(alpha_c + beta_c d))"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["binomial"] = "binomial"
    alpha: Tuple[float, float, float, float]
    beta: Tuple[float, float, float, float]
    trials: int = Field(gt=0)


OutcomeFamily = Annotated[Union[GaussianLinear, BinomialLogit], Field(discriminator="kind")]


class FitConfig(BaseModel):
    """EM settings"""
    model_config = ConfigDict(extra="forbid")

    family: Literal["gaussian", "binomial"] = "gaussian"
    trials: Optional[int] = Field(default=None, gt=0, description="Binomial trials m (default: max outcome)")
    max_iters: int = Field(default=Config.MAX_ITERS, ge=1)
    rel_tol: float = Field(default=Config.REL_TOL, gt=0.0)
    param_tol: Optional[float] = Field(default=None, gt=0.0)
    n_starts: int = Field(default=Config.N_STARTS, ge=1)
    seed: int = 0
    prior: PriorConfig = Field(default_factory=PriorConfig)
    pq_bounds: Tuple[float, float] = Config.PQ_BOUNDS
    stratified: bool = False
    tail_mass: Optional[float] = Field(default=Config.PRIOR_TAIL_MASS, gt=0.0, le=0.01)
    exclude_isolated: bool = False
    bootstrap_starts: int = Field(default=1, ge=1)
    threads: int = Field(default=Config.THREADS, ge=1)

    @field_validator("pq_bounds")
    @classmethod
    def _bounds(cls, value):
        lo, hi = value
        if not 0.0 <= lo < hi < 1.0:
            raise ValueError(f"pq_bounds must satisfy 0 <= lo < hi < 1, got {value}")
        return value


class BootstrapSummary(BaseModel):
    """Parametric bootstrap standard errors and percentile intervals"""
    n_reps: int
    n_failed: int
    level: float
    se: Dict[str, float]
    ci_low: Dict[str, float]
    ci_high: Dict[str, float]


class FitResult(BaseModel):
    """Outcome of a multi-start EM fit"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    family: OutcomeFamily
    mismeasure: MismeasureParams
    loglik_trace: List[float]
    mean_outcomes: Dict[str, float]
    contrasts: Dict[str, float]
    converged: bool
    best_start: int
    n_iters: int
    start_logliks: List[Optional[float]] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)
    priors: List[Dict[str, BetaBinomialPrior]] = Field(default_factory=list)
    bootstrap: Optional[BootstrapSummary] = None
    responsibilities: Optional[np.ndarray] = Field(default=None, exclude=True)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


class HTResult(BaseModel):
    """Horvitz-Thompson means with the inclusion bookkeeping behind them"""
    means: Dict[str, float]
    n_included: int
    included: List[int]
    excluded: List[int]
    conditions: List[str] = Field(description="Observed exposure condition per node")
    probabilities: List[List[float]] = Field(description="Analytic condition probabilities per node")
    empty_conditions: List[str] = Field(default_factory=list)


class OracleResult(BaseModel):
    """Expected HT estimate over assignments on a possibly mismeasured graph"""
    method: Literal["enumeration", "monte_carlo"]
    n_assignments: int
    expected: Dict[str, float]
    true_means: Dict[str, float]
    bias: Dict[str, float]
    standard_errors: Optional[Dict[str, float]] = None


def _default_truth() -> GaussianLinear:
    return GaussianLinear(alpha=(0.0, 0.25, 0.5, 1.0), beta=(0.05, 0.1, 0.05, 0.1), sigma2=0.25)


_DEFAULT_GRID = (0.0, 0.125, 0.25, 0.375, 0.5)


class SimProtocol(BaseModel):
    """Simulation study: networks x replicates x (p, q) grid"""
    model_config = ConfigDict(extra="forbid")

    n_networks: int = Field(default=75, ge=1)
    generator: Literal["heterogeneous", "er"] = "heterogeneous"
    n_nodes: int = Field(default=200, ge=2)
    mu: float = Field(default=0.02, ge=0.0, le=1.0)
    rho: float = Field(default=0.01, ge=0.0, lt=1.0)
    edge_lists: Optional[List[str]] = Field(default=None, description="Use these files instead of generating")
    n_reps: int = Field(default=10, ge=1)
    assign_prob: float = Field(default=0.25, gt=0.0, lt=1.0)
    truth: OutcomeFamily = Field(default_factory=_default_truth)
    p_grid: List[float] = Field(default_factory=lambda: list(_DEFAULT_GRID))
    q_grid: List[float] = Field(default_factory=lambda: list(_DEFAULT_GRID))
    q_mode: Literal["absolute", "density_scaled"] = "density_scaled"
    prior_mode: Literal["density", "empirical"] = "density"
    methods: List[Literal["ht", "em", "naive"]] = Field(default_factory=lambda: ["ht", "em"])
    fit: FitConfig = Field(default_factory=lambda: FitConfig(exclude_isolated=True))
    seed: int = 0

    @field_validator("p_grid", "q_grid")
    @classmethod
    def _grid(cls, value, info):
        if not value:
            raise ValueError(f"{info.field_name} must not be empty")
        for v in value:
            _check_probability(v, info.field_name)
        return value


class RunManifest(BaseModel):
    """Provenance record written next to every CLI output"""
    command: str
    config_hash: str
    input_digests: Dict[str, str]
    seed: int
    tool_version: str
    started_at: datetime = Field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
