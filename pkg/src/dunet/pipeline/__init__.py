"""Data preparation: OD localization, ROI crops, synthetic data and loaders."""
from ..geometry import Ellipse, rasterize_ellipse_mask
from .datasets import (LAYOUTS, DatasetError, LoadResult, Prepared, SampleRecord, load_dataset,
                       load_image, load_mask, prepare, save_png, write_dataset)
from .localize import LocalizationError, RoiBox, extract_roi, localize_od
from .synthetic import Sample, generate_synthetic_dataset

__all__ = [
    "LAYOUTS", "DatasetError", "Ellipse", "LoadResult", "LocalizationError", "Prepared", "RoiBox",
    "Sample", "SampleRecord", "extract_roi", "generate_synthetic_dataset", "load_dataset",
    "load_image", "load_mask", "localize_od", "prepare", "rasterize_ellipse_mask", "save_png",
    "write_dataset",
]
