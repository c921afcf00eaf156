"""Surrogate-assisted estimation with stratified gold-standard coding."""

__version__ = "0.1.0"

from .allocation import Allocation, neyman_allocation, proportional_allocation
from .core import (
    ColumnMapping,
    Mode,
    PopulationTable,
    StrataAssignment,
    UnitRecord,
    ValidationReport,
    load_population,
    read_population,
    residuals,
    validate,
    write_population,
)
from .estimators import (
    EstimateReport,
    estimate_ma_srs,
    estimate_ma_stratified,
    estimate_oracle,
    estimate_subset,
)
from .sampling import SampleDraw, Seed, srs_sample, stratified_sample
from .variance import (
    Decomposition,
    VarianceReport,
    bs_ws_decomposition,
    exact_conditional_variance,
    plugin_variance,
)

__all__ = [
    "Allocation", "ColumnMapping", "Decomposition", "EstimateReport", "Mode", "PopulationTable", "SampleDraw",
    "Seed", "StrataAssignment", "UnitRecord", "ValidationReport", "VarianceReport", "bs_ws_decomposition",
    "estimate_ma_srs", "estimate_ma_stratified", "estimate_oracle", "estimate_subset",
    "exact_conditional_variance", "load_population", "neyman_allocation", "plugin_variance",
    "proportional_allocation", "read_population", "residuals", "srs_sample", "stratified_sample", "validate",
    "write_population",
]
