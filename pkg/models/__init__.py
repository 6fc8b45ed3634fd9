from models.data_models import (
    CONDITION_LABELS,
    STRATUM_ALL,
    STRATUM_BETWEEN,
    STRATUM_WITHIN,
    BetaBinomialPrior,
    BinomialLogit,
    BootstrapSummary,
    CorruptionSpec,
    DirectedGraph,
    ExperimentDesign,
    ExposureCondition,
    FitConfig,
    FitResult,
    GaussianLinear,
    HTResult,
    MismeasureParams,
    OracleResult,
    OutcomeFamily,
    PriorConfig,
    RunManifest,
    SimProtocol,
)
