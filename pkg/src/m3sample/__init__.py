"""Multi-scale, variation-aware sampling measures for large labeled point clouds."""
from .allocate import AllocConfig, AllocationPlan, M3Result, draw_samples, m3_sample, plan_allocation
from .cloud import BoundingCube, LabeledPointCloud, compute_bounds, load_cloud, write_cloud, zscore_normalize
from .measure import (BoundViolation, CellMeasure, EmpiricalMeasure, decomposition_terms,
                      importance_weighted_risk, risk_gap_check, target_measure, tv_distance)
from .metrics import FieldPair, error_report, unweighted_errors, weighted_errors
from .morton import SortedIndex, morton_encode, morton_sort, quantize
from .partition import Partition, PartitionConfig, build_partition, cell_variation_score, projection_diameter
from .stratify import Stratification, StratifyConfig, assign_strata
from .synth import generate_cloud

__version__ = "0.1.0"

__all__ = [
    "AllocConfig", "AllocationPlan", "M3Result", "draw_samples", "m3_sample", "plan_allocation",
    "BoundingCube", "LabeledPointCloud", "compute_bounds", "load_cloud", "write_cloud",
    "zscore_normalize", "BoundViolation", "CellMeasure", "EmpiricalMeasure", "decomposition_terms",
    "importance_weighted_risk", "risk_gap_check", "target_measure", "tv_distance", "FieldPair",
    "error_report", "unweighted_errors", "weighted_errors", "SortedIndex", "morton_encode",
    "morton_sort", "quantize", "Partition", "PartitionConfig", "build_partition",
    "cell_variation_score", "projection_diameter", "Stratification", "StratifyConfig",
    "assign_strata", "generate_cloud",
]
