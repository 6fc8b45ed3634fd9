import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Tool version recorded in run manifests
    VERSION = "0.1.0"

    # Output locations
    OUTPUT_DIR = os.getenv("SPILLOVER_OUTPUT_DIR", "data/output")

    # Parallelism (engine results are identical for every value)
    THREADS = int(os.getenv("SPILLOVER_THREADS", "1"))

    # Logging
    LOG_LEVEL = os.getenv("SPILLOVER_LOG_LEVEL", "WARNING")

    # Degree prior
    PRIOR_TAIL_MASS = float(os.getenv("SPILLOVER_TAIL_MASS", "1e-8"))

    # EM settings
    MAX_ITERS = 500
    REL_TOL = 1e-8
    N_STARTS = 10
    PQ_BOUNDS = (1e-6, 0.9)
    MIN_VARIANCE = 1e-10
    LOGIT_BOUND = 20.0
    NEWTON_TOL = 1e-10
    PQ_OBJECTIVE_TOL = 1e-10

    # Bootstrap
    BOOTSTRAP_REPS = 200
    BOOTSTRAP_MAX_FAILURE = 0.2
    CI_LEVEL = 0.9

    # Bias oracle switches from enumeration to Monte Carlo above this size
    ORACLE_ENUMERATION_LIMIT = 12
