from .augment import OPS, AugmentPlan, augment, draw_params, expand, output_count
from .dataset import as_arrays, build_augmented_dataset, encode_dataset, load_dataset, save_dataset, split
from .dicom import DicomSlice, read_dicom_series, read_dicom_slice, series_volume
from .synthetic import generate_synthetic
from .volume import SliceSample, make_sample, normalize_volume, read_pgm, resize, slice_and_pair, write_pgm

__all__ = [
    "OPS", "AugmentPlan", "augment", "draw_params", "expand", "output_count",
    "as_arrays", "build_augmented_dataset", "encode_dataset", "load_dataset", "save_dataset", "split",
    "DicomSlice", "read_dicom_series", "read_dicom_slice", "series_volume",
    "generate_synthetic",
    "SliceSample", "make_sample", "normalize_volume", "read_pgm", "resize", "slice_and_pair", "write_pgm",
]
