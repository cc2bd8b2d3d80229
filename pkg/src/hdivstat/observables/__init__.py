"""Post-processing of velocity ensembles."""
from .stats import (
    ConstantField,
    MeanField,
    StatisticField,
    VarianceField,
    cauchy_error,
    element_average,
    ensemble_mean,
    ensemble_variance,
)
from .structure import (
    GridError,
    HashCorruptionError,
    HashGrid,
    StructureFunctionResult,
    characteristic_size,
    default_offsets,
    grid_size,
    make_hash_table,
    structure_function_ensemble,
    structure_function_of_sample,
    structure_functions,
    update_hash_table,
)
from .wasserstein import InvalidMeasureError, WassersteinResult, emd, overlay_points, wasserstein_distances

__all__ = [
    "ConstantField", "MeanField", "StatisticField", "VarianceField", "cauchy_error", "element_average",
    "ensemble_mean", "ensemble_variance", "GridError", "HashCorruptionError", "HashGrid",
    "StructureFunctionResult", "characteristic_size", "default_offsets", "grid_size", "make_hash_table",
    "structure_function_ensemble", "structure_function_of_sample", "structure_functions",
    "update_hash_table", "InvalidMeasureError", "WassersteinResult", "emd", "overlay_points",
    "wasserstein_distances",
]
