"""Heteroskedasticity-robust IV estimation and overidentification tests under weak instruments."""

from .core import IVDataset, orthonormalize, partial_out, prepare, validate
from .covariance import HC0, HC1, HOMOSKEDASTIC, CovarianceSpec, meat, newey_west
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DimensionError,
    DomainError,
    GapError,
    NonFiniteError,
    NumericalError,
    ParseError,
    PartitionError,
    RankError,
    SchemaError,
    SingularityError,
    UnsupportedError,
    UsageError,
    WeakIVError,
)
from .estimators import (
    EstimationResult,
    estimate_2sls,
    estimate_gmm2,
    estimate_kclass,
    estimate_liml,
    robust_covariance,
    two_step_gmm,
)
from .stats import (
    ConcentrationResult,
    TestResult,
    chi2_sf,
    concentration,
    effective_f,
    j_test,
    kp_test,
    robust_score,
    sargan_test,
)

__version__ = "0.1.0"
