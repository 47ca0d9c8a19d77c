"""DICOM series ingestion for uncompressed explicit-VR little-endian files.

pydicom handles the container; pixel payloads are decoded here straight
from the raw bytes so the supported subset stays explicit.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError
from pydicom.uid import ExplicitVRLittleEndian

from ..errors import ParseError, UnsupportedFormatError

REQUIRED = {
    "Rows": "(0028,0010) Rows",
    "Columns": "(0028,0011) Columns",
    "BitsAllocated": "(0028,0100) BitsAllocated",
    "PixelData": "(7FE0,0010) PixelData",
    "ImagePositionPatient": "(0020,0032) ImagePositionPatient",
    "InstanceNumber": "(0020,0013) InstanceNumber",
    "PixelSpacing": "(0028,0030) PixelSpacing",
}


@dataclass
class DicomSlice:
    rows: int
    cols: int
    pixels: np.ndarray  # rescaled, float64, rows x cols
    slope: float
    intercept: float
    instance: int
    z: float
    spacing: tuple[float, float]
    path: str


def _require(ds, key: str, path: str):
    if key not in ds:
        raise ParseError(f"{path}: missing required tag {REQUIRED[key]}")
    return ds[key].value


def read_dicom_slice(path) -> DicomSlice:
    path = os.fspath(path)
    try:
        ds = pydicom.dcmread(path)
    except InvalidDicomError as exc:
        raise ParseError(f"{path}: not a DICOM file ({exc})") from None
    except Exception as exc:  # truncated or garbled container
        raise ParseError(f"{path}: unreadable DICOM ({exc})") from None

    meta = getattr(ds, "file_meta", None)
    syntax = getattr(meta, "TransferSyntaxUID", None) if meta is not None else None
    if syntax is None:
        raise ParseError(f"{path}: missing (0002,0010) TransferSyntaxUID")
    if syntax != ExplicitVRLittleEndian:
        raise UnsupportedFormatError(
            f"{path}: transfer syntax {syntax} ({getattr(syntax, 'name', '?')}) unsupported; "
            "only uncompressed explicit VR little endian is accepted")
    if int(ds.get("NumberOfFrames", 1) or 1) != 1:
        raise UnsupportedFormatError(f"{path}: multi-frame images are unsupported")

    rows = int(_require(ds, "Rows", path))
    cols = int(_require(ds, "Columns", path))
    bits = int(_require(ds, "BitsAllocated", path))
    raw = _require(ds, "PixelData", path)
    position = _require(ds, "ImagePositionPatient", path)
    instance = int(_require(ds, "InstanceNumber", path))
    spacing = _require(ds, "PixelSpacing", path)
    if int(ds.get("SamplesPerPixel", 1)) != 1:
        raise UnsupportedFormatError(f"{path}: only single-sample (grayscale) pixels are supported")

    signed = int(ds.get("PixelRepresentation", 0)) == 1
    kinds = {8: "i1" if signed else "u1", 16: "<i2" if signed else "<u2", 32: "<i4" if signed else "<u4"}
    if bits not in kinds:
        raise UnsupportedFormatError(f"{path}: BitsAllocated={bits} unsupported")
    dt = np.dtype(kinds[bits])
    expected = rows * cols * dt.itemsize
    # odd-length payloads are padded to even length on disk
    if len(raw) not in (expected, expected + 1):
        raise ParseError(f"{path}: (7FE0,0010) PixelData has {len(raw)} bytes, expected {expected} "
                         f"for {rows}x{cols} at {bits} bits")
    values = np.frombuffer(raw, dtype=dt, count=rows * cols).reshape(rows, cols)

    slope = float(ds.RescaleSlope) if "RescaleSlope" in ds else 1.0
    intercept = float(ds.RescaleIntercept) if "RescaleIntercept" in ds else 0.0
    try:
        z = float(position[2])
        pitch = (float(spacing[0]), float(spacing[1]))
    except (TypeError, IndexError, ValueError):
        raise ParseError(f"{path}: malformed ImagePositionPatient/PixelSpacing") from None
    pixels = values.astype(np.float64) * slope + intercept
    return DicomSlice(rows, cols, pixels, slope, intercept, instance, z, pitch, path)


def read_dicom_series(directory) -> list[DicomSlice]:
    """Every DICOM file in ``directory``, ordered by z then instance number."""
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        raise ParseError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory) if not n.startswith("."))
    files = [os.path.join(directory, n) for n in names if os.path.isfile(os.path.join(directory, n))]
    if not files:
        raise ParseError(f"{directory}: no DICOM files found")
    slices = [read_dicom_slice(f) for f in files]
    first = slices[0]
    for s in slices[1:]:
        if (s.rows, s.cols) != (first.rows, first.cols):
            raise ParseError(f"{s.path}: size {s.rows}x{s.cols} differs from {first.rows}x{first.cols} in series")
    # pixel content is the final tie-break, so renaming files cannot change the order
    slices.sort(key=lambda s: (s.z, s.instance, s.pixels.tobytes()))
    return slices


def series_volume(slices: list[DicomSlice]) -> np.ndarray:
    return np.stack([s.pixels for s in slices])
