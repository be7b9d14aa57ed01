"""Synthetic datasets, ambiguity probes, file I/O and the command line."""

from .datasets import Dataset, DatasetConfig, archive_digest, load_dataset, make_dataset
from .probes import (
    HollowMaskReport,
    ReferenceReport,
    hollow_mask_probe,
    radial_error,
    reference_ambiguity_probe,
)

__all__ = [
    "Dataset",
    "DatasetConfig",
    "HollowMaskReport",
    "ReferenceReport",
    "archive_digest",
    "hollow_mask_probe",
    "load_dataset",
    "make_dataset",
    "radial_error",
    "reference_ambiguity_probe",
]
