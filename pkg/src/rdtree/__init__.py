"""Honest regression discontinuity trees for heterogeneous treatment effects."""

from .data import Dataset, Schema, honest_split, load_dataset, restrict_bandwidth, write_dataset
from .errors import RDTreeError
from .tree import (
    FitConfig,
    Tree,
    cross_validate,
    fit,
    grow_tree,
    honest_criterion,
    honest_estimate,
    predict,
    prune,
    weakest_link,
)

__all__ = [
    "Dataset",
    "Schema",
    "FitConfig",
    "RDTreeError",
    "Tree",
    "cross_validate",
    "fit",
    "grow_tree",
    "honest_criterion",
    "honest_estimate",
    "honest_split",
    "load_dataset",
    "predict",
    "prune",
    "restrict_bandwidth",
    "weakest_link",
    "write_dataset",
]
