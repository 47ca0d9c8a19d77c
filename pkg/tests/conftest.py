import os

import numpy as np
import pytest
from pydicom.dataset import Dataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, MRImageStorage, generate_uid


def write_dicom(path, pixels: np.ndarray, z: float, instance: int, slope=None, intercept=None,
                syntax=ExplicitVRLittleEndian, drop=()):
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = MRImageStorage
    meta.MediaStorageSOPInstanceUID = generate_uid()
    meta.TransferSyntaxUID = syntax
    ds = Dataset()
    ds.file_meta = meta
    ds.SOPClassUID = MRImageStorage
    ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    ds.Modality = "MR"
    ds.Rows, ds.Columns = pixels.shape
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.ImagePositionPatient = [0.0, 0.0, float(z)]
    ds.InstanceNumber = instance
    ds.PixelSpacing = [0.84, 0.84]
    ds.SliceThickness = 2.0
    if slope is not None:
        ds.RescaleSlope = slope
    if intercept is not None:
        ds.RescaleIntercept = intercept
    ds.add_new(0x7FE00010, "OW", np.ascontiguousarray(pixels, dtype="<u2").tobytes())
    for name in drop:
        delattr(ds, name)
    ds.save_as(path, enforce_file_format=True)


def write_series(directory, volume: np.ndarray, z0=-10.0, dz=2.0, shuffle_seed=0, **kw):
    """Write one file per slice with names deliberately unrelated to z."""
    os.makedirs(directory, exist_ok=True)
    order = np.random.default_rng(shuffle_seed).permutation(len(volume))
    for name_idx, z_idx in enumerate(order):
        write_dicom(os.path.join(directory, f"IM{name_idx:03d}.dcm"), volume[z_idx], z0 + dz * z_idx,
                    instance=int(z_idx) + 1, **kw)
    return order


@pytest.fixture
def dicom_series(tmp_path):
    r = np.random.default_rng(0)
    vol = r.integers(0, 4000, size=(4, 8, 8)).astype(np.uint16)
    d = tmp_path / "series"
    write_series(d, vol)
    return d, vol


# -- acceptance report ---------------------------------------------------------
# test_acceptance.py appends (number, title, passed, detail) here and extra
# lines (tables) to ACCEPTANCE_NOTES; both are printed after the run.

ACCEPTANCE: list[tuple[int, str, bool, str]] = []
ACCEPTANCE_NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not ACCEPTANCE_NOTES:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        tr.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    for line in ACCEPTANCE_NOTES:
        tr.write_line(line)
