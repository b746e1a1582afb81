"""Parallel nearest-neighbour clustering for merging small parcels."""
from .domain import Decomposition, Domain, minimum_image_delta, nearest_node, surrounding_cells
from .engine import run_parallel
from .oracle import oracle_cluster
from .parcels import Parcel, ParcelStore, is_small, merge_group, sample_artificial
from .partition import MergeGroup, MergePartition

__all__ = [
    "Decomposition",
    "Domain",
    "MergeGroup",
    "MergePartition",
    "Parcel",
    "ParcelStore",
    "is_small",
    "merge_group",
    "minimum_image_delta",
    "nearest_node",
    "oracle_cluster",
    "run_parallel",
    "sample_artificial",
    "surrounding_cells",
]
