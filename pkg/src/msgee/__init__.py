"""Marginal regression for transient state occupation probabilities.

Clustered, right-censored multistate data; weighted functional GEE with
sandwich inference, multiplier-bootstrap bands and sup tests, and the
simulation model used to check them.
"""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Cluster,
    IndicatorSlice,
    StepFunction,
    StudyData,
    SubjectRecord,
    alive,
    jump_grid,
    missingness_indicator,
    response_jump_percentiles,
    risk_indicator,
    slice_at,
)
from .dgp import SimConfig, SimTruth, simulate_study  # noqa: E402
from .exceptions import (  # noqa: E402
    ConvergenceWarning,
    DataFormatError,
    DomainUndefinedError,
    EmptyDomainError,
    InsufficientClustersError,
    InvalidStateError,
    MsgeeError,
    NumericalError,
    SeparationError,
    SingularDesignError,
)
from .gee import FitConfig, FitResult, estimating_function, fit_path, solve_at_time  # noqa: E402
from .inference import (  # noqa: E402
    InfluencePath,
    fit_with_influence,
    h_matrix,
    influence,
    influence_path,
    pointwise_se,
    q_weight,
    sandwich_cov,
)
from .links import CLOGLOG, LOGIT, get_family  # noqa: E402
from .multiplier import BandResult, TestResult, confidence_band, draw_W, ks_test  # noqa: E402

__all__ = [
    "__version__",
    "Cluster", "IndicatorSlice", "StepFunction", "StudyData", "SubjectRecord",
    "alive", "jump_grid", "missingness_indicator", "response_jump_percentiles",
    "risk_indicator", "slice_at",
    "SimConfig", "SimTruth", "simulate_study",
    "ConvergenceWarning", "DataFormatError", "DomainUndefinedError", "EmptyDomainError",
    "InsufficientClustersError", "InvalidStateError", "MsgeeError", "NumericalError",
    "SeparationError", "SingularDesignError",
    "FitConfig", "FitResult", "estimating_function", "fit_path", "solve_at_time",
    "InfluencePath", "fit_with_influence", "h_matrix", "influence", "influence_path",
    "pointwise_se", "q_weight", "sandwich_cov",
    "CLOGLOG", "LOGIT", "get_family",
    "BandResult", "TestResult", "confidence_band", "draw_W", "ks_test",
]
