"""Measurement algorithms over masks and contours."""

from tissueflow.measure.contours import Contour, extract_contours, largest_contour
from tissueflow.measure.doi import Measurement, measure_doi
from tissueflow.measure.regions import (
    NodeResult,
    count_components,
    masked_mean_intensity,
    max_extent_mm,
    node_positivity,
    positive_node_count,
)
from tissueflow.measure.tissue import TissueMaskConfig, preprocess_tissue_mask
from tissueflow.measure.wall import WallThickness, ed_frame, measure_wall_thickness

__all__ = [
    "Contour",
    "Measurement",
    "NodeResult",
    "TissueMaskConfig",
    "WallThickness",
    "count_components",
    "ed_frame",
    "extract_contours",
    "largest_contour",
    "masked_mean_intensity",
    "max_extent_mm",
    "measure_doi",
    "measure_wall_thickness",
    "node_positivity",
    "positive_node_count",
    "preprocess_tissue_mask",
]
