"""Data ingestion, preprocessing, augmentation, folds and synthetic scans."""
from .augment import PAPER_PATCH, AugmentationConfig, augment, pad_to, sample_patch
from .folds import FoldAssignment, ScanInfo, stratified_group_kfold
from .rle import rle_decode, rle_encode
from .synthetic import SyntheticDataset, generate_synthetic
from .volume import (
    SliceRecord,
    VolumeSample,
    annotated_fraction,
    assemble_volume,
    crop_foreground,
    ingest,
    load_volume,
    normalize_intensity,
    preprocess,
    read_manifest,
    save_volume,
    uncrop,
    volume_to_rows,
    write_manifest,
)

__all__ = [
    "PAPER_PATCH",
    "AugmentationConfig",
    "FoldAssignment",
    "ScanInfo",
    "SliceRecord",
    "SyntheticDataset",
    "VolumeSample",
    "annotated_fraction",
    "assemble_volume",
    "augment",
    "crop_foreground",
    "generate_synthetic",
    "ingest",
    "load_volume",
    "normalize_intensity",
    "pad_to",
    "preprocess",
    "read_manifest",
    "rle_decode",
    "rle_encode",
    "sample_patch",
    "save_volume",
    "stratified_group_kfold",
    "uncrop",
    "volume_to_rows",
    "write_manifest",
]
