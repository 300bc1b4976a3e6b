"""Design and analysis of closed-cohort stepped wedge trials with a proportional decay correlation."""

from .correlation import (
    CorrelationParams,
    build_exponential_decay,
    build_proportional_decay,
    check_validity,
    invert_proportional_decay,
    log_determinant_proportional_decay,
)
from .data import TrialDataset, read_dataset_csv, write_dataset_csv
from .design import (
    BlockExchangeableParams,
    DesignLayout,
    PowerQuery,
    design_effect,
    general_layout,
    power,
    required_cohort_size,
    standard_layout,
    variance_delta,
)
from .estimation import FitResult, QuasiLeastSquares, fit, wald_test
from .exceptions import (
    DatasetError,
    DegenerateDataError,
    InsufficientClustersError,
    NonIdentifiableDesignError,
    NumericalError,
    RegionError,
    SingularMatrixError,
    SwdecayError,
    ValidationError,
)
from .simulation import SimScenario, generate_dataset, run_scenario

__version__ = "0.1.0"

__all__ = [
    "BlockExchangeableParams",
    "CorrelationParams",
    "DatasetError",
    "DegenerateDataError",
    "DesignLayout",
    "FitResult",
    "InsufficientClustersError",
    "NonIdentifiableDesignError",
    "NumericalError",
    "PowerQuery",
    "QuasiLeastSquares",
    "RegionError",
    "SimScenario",
    "SingularMatrixError",
    "SwdecayError",
    "TrialDataset",
    "ValidationError",
    "build_exponential_decay",
    "build_proportional_decay",
    "check_validity",
    "design_effect",
    "fit",
    "general_layout",
    "generate_dataset",
    "invert_proportional_decay",
    "log_determinant_proportional_decay",
    "power",
    "read_dataset_csv",
    "required_cohort_size",
    "run_scenario",
    "standard_layout",
    "variance_delta",
    "wald_test",
    "write_dataset_csv",
]
