"""Impulse-response releases to .hds: FFT magnitudes on a uniform dB grid.

Supported inputs: SOFA/HDF5 files following the SimpleFreeFieldHRIR layout
(one subject per file, two receivers) and CIPIC-style MATLAB releases with
hrir_l/hrir_r arrays on the standard interaural-polar grid. Output goes
through the primary package's container writer, so everything written here
passes its validation on read.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from hrtfproto.dataio import (
    ANTHRO_NAMES,
    AnthropometricVector,
    HrtfDataset,
    SubjectRecord,
    frequency_grid,
    read_dataset,
    write_dataset,
)

MAG_FLOOR_DB = -100.0  # avoids -inf on measurement nulls


class ConversionError(ValueError):
    pass


@dataclass
class ConversionSpec:
    input_paths: list
    dataset_id: str
    out_path: str
    num_freq_bins: int = 128
    f_max_hz: float = 20000.0
    anthro_csv: str | None = None
    subject_allowlist: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# coordinate conventions


def spherical_to_cartesian(az_deg, el_deg, radius):
    """SOFA spherical (azimuth/elevation degrees) to +x front, +y left, +z up."""
    az = np.radians(az_deg)
    el = np.radians(el_deg)
    return np.stack([
        radius * np.cos(el) * np.cos(az),
        radius * np.cos(el) * np.sin(az),
        radius * np.sin(el),
    ], axis=-1)


def interaural_polar_to_cartesian(az_deg, el_deg, radius):
    """CIPIC interaural-polar angles to Cartesian; azimuth positive is right."""
    az = np.radians(az_deg)
    el = np.radians(el_deg)
    return np.stack([
        radius * np.cos(az) * np.cos(el),
        -radius * np.sin(az),
        radius * np.cos(az) * np.sin(el),
    ], axis=-1)


# ---------------------------------------------------------------------------
# magnitude extraction


def magnitudes_from_impulse_responses(irs, fs, frequencies_hz):
    """(B, 2, N) impulse responses to (B, 2L) dB on the target grid.

    The FFT magnitude is interpolated linearly in dB onto the requested bins
    and floored at MAG_FLOOR_DB. Requires fs >= 2 * f_max.
    """
    irs = np.asarray(irs, dtype=np.float64)
    if irs.ndim != 3 or irs.shape[1] != 2:
        raise ConversionError(f"impulse responses must be (B, 2, N), got {irs.shape}")
    f_max = float(frequencies_hz[-1])
    if fs < 2.0 * f_max:
        raise ConversionError(
            f"sample rate {fs} Hz too low for f_max {f_max} Hz (need >= {2 * f_max})")
    n = irs.shape[2]
    n_fft = 1
    while n_fft < max(n, 4 * len(frequencies_hz)):
        n_fft *= 2
    spectrum = np.fft.rfft(irs, n=n_fft, axis=2)
    grid = np.fft.rfftfreq(n_fft, d=1.0 / fs)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.abs(spectrum))
    db = np.maximum(db, MAG_FLOOR_DB)
    b = irs.shape[0]
    l = len(frequencies_hz)
    out = np.empty((b, 2 * l), dtype=np.float32)
    for ear in (0, 1):
        for i in range(b):
            out[i, ear * l : (ear + 1) * l] = np.interp(frequencies_hz, grid, db[i, ear])
    return out


# ---------------------------------------------------------------------------
# anthropometry table


def load_anthropometry(csv_path):
    """CSV with columns subject_id, ear, then the 23 names in order.

    Returns {subject_id: {ear: AnthropometricVector}}; rows with missing or
    non-finite entries are dropped (the subject becomes pretraining-only).
    """
    table = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("subject_id", "ear", *ANTHRO_NAMES)
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise ConversionError(f"anthropometry CSV missing columns: {missing}")
        for row in reader:
            ear = row["ear"].strip().lower()
            if ear not in ("left", "right"):
                raise ConversionError(f"ear must be left/right, got {row['ear']!r}")
            try:
                values = np.array([float(row[name]) for name in ANTHRO_NAMES])
            except (TypeError, ValueError):
                continue
            if not np.all(np.isfinite(values)):
                continue
            table.setdefault(row["subject_id"], {})[ear] = AnthropometricVector(values)
    return table


# ---------------------------------------------------------------------------
# readers


def read_sofa(path):
    """SimpleFreeFieldHRIR layout: returns (positions_xyz, irs (B, 2, N), fs)."""
    import h5py

    with h5py.File(path, "r") as f:
        if "Data.IR" not in f:
            raise ConversionError(f"{path}: no Data.IR dataset (not a SOFA HRIR file)")
        irs = np.asarray(f["Data.IR"])
        fs = float(np.ravel(f["Data.SamplingRate"])[0])
        source = np.asarray(f["SourcePosition"])
        pos_type = f["SourcePosition"].attrs.get("Type", b"spherical")
        if isinstance(pos_type, bytes):
            pos_type = pos_type.decode()
    if irs.ndim != 3:
        raise ConversionError(f"{path}: Data.IR must be (M, R, N), got {irs.shape}")
    if irs.shape[1] != 2:
        raise ConversionError(f"{path}: expected 2 receivers, got {irs.shape[1]}")
    if str(pos_type).lower().startswith("cart"):
        xyz = source[:, :3]
    else:
        xyz = spherical_to_cartesian(source[:, 0], source[:, 1], source[:, 2])
    return xyz, irs, fs


# standard CIPIC release grid
CIPIC_AZIMUTHS = np.array(
    [-80, -65, -55] + list(range(-45, 50, 5)) + [55, 65, 80], dtype=np.float64)
CIPIC_ELEVATIONS = -45.0 + 5.625 * np.arange(50)


def read_cipic_mat(path):
    """Legacy MATLAB release with hrir_l/hrir_r (25, 50, N) arrays."""
    from scipy.io import loadmat

    data = loadmat(path)
    if "hrir_l" not in data or "hrir_r" not in data:
        raise ConversionError(f"{path}: expected hrir_l/hrir_r arrays")
    left = np.asarray(data["hrir_l"], dtype=np.float64)
    right = np.asarray(data["hrir_r"], dtype=np.float64)
    fs = float(np.ravel(data.get("fs", 44100.0))[0])
    radius = float(np.ravel(data.get("r", 1.0))[0])
    if left.shape != right.shape or left.ndim != 3:
        raise ConversionError(f"{path}: hrir arrays must both be (25, 50, N)")
    az, el = np.meshgrid(CIPIC_AZIMUTHS, CIPIC_ELEVATIONS, indexing="ij")
    xyz = interaural_polar_to_cartesian(az.ravel(), el.ravel(), radius)
    irs = np.stack([left.reshape(-1, left.shape[2]),
                    right.reshape(-1, right.shape[2])], axis=1)
    return xyz, irs, fs


def read_release(path):
    ext = os.path.splitext(path)[1].lower()
    if ext in (".sofa", ".h5", ".hdf5"):
        return read_sofa(path)
    if ext == ".mat":
        return read_cipic_mat(path)
    raise ConversionError(f"unsupported input format: {path}")


# ---------------------------------------------------------------------------
# conversion


def convert(spec: ConversionSpec) -> str:
    """Convert the release files into one .hds dataset, one subject per file."""
    if not spec.input_paths:
        raise ConversionError("no input files")
    anthro = load_anthropometry(spec.anthro_csv) if spec.anthro_csv else {}
    freqs = frequency_grid(spec.num_freq_bins, spec.f_max_hz)
    subjects = []
    ref_positions = None
    ref_r = None
    for path in spec.input_paths:
        subject_id = os.path.splitext(os.path.basename(path))[0]
        if spec.subject_allowlist and subject_id not in spec.subject_allowlist:
            continue
        xyz, irs, fs = read_release(path)
        radius = float(np.median(np.linalg.norm(xyz, axis=1)))
        if ref_positions is None:
            ref_positions, ref_r = xyz, radius
        elif xyz.shape != ref_positions.shape or not np.allclose(
                xyz, ref_positions, atol=1e-4):
            raise ConversionError(
                f"{path}: source grid differs from the first file; convert "
                f"differing grids into separate datasets")
        mags = magnitudes_from_impulse_responses(irs, fs, freqs)
        ears = anthro.get(subject_id, {})
        left, right = ears.get("left"), ears.get("right")
        if left is None or right is None:
            left = right = None  # incomplete: pretraining-only subject
        subjects.append(SubjectRecord(subject_id, mags, left, right))
    if not subjects:
        raise ConversionError("no subjects converted (allowlist too strict?)")
    ds = HrtfDataset(
        dataset_id=spec.dataset_id,
        f_max_hz=spec.f_max_hz,
        source_distance_m=ref_r,
        frequencies_hz=freqs,
        positions=ref_positions.astype(np.float32),
        subjects=subjects,
    )
    write_dataset(ds, spec.out_path)
    return spec.out_path


def convert_sofa(spec: ConversionSpec) -> str:
    return convert(spec)


# ---------------------------------------------------------------------------
# validation


@dataclass
class RoundtripReport:
    ok: bool
    dataset_id: str = ""
    num_subjects: int = 0
    num_positions: int = 0
    num_freq_bins: int = 0
    anthro_complete: int = 0
    magnitude_mean_db: float = 0.0
    magnitude_min_db: float = 0.0
    magnitude_max_db: float = 0.0
    error: str = ""

    def summary(self):
        if not self.ok:
            return f"FAIL: {self.error}"
        return (
            f"PASS: {self.dataset_id}: S={self.num_subjects} "
            f"B={self.num_positions} L={self.num_freq_bins}; "
            f"{self.anthro_complete} subjects with complete anthropometry; "
            f"magnitudes [{self.magnitude_min_db:.1f}, {self.magnitude_max_db:.1f}] dB "
            f"(mean {self.magnitude_mean_db:.1f})"
        )


def validate_roundtrip(path) -> RoundtripReport:
    """Re-read with the primary package's reader and summarize the contents."""
    try:
        ds = read_dataset(path)
    except Exception as exc:  # format violations carry byte offsets
        return RoundtripReport(ok=False, error=str(exc))
    mags = np.concatenate([s.magnitudes_db.ravel() for s in ds.subjects])
    return RoundtripReport(
        ok=True,
        dataset_id=ds.dataset_id,
        num_subjects=ds.num_subjects,
        num_positions=ds.num_positions,
        num_freq_bins=ds.num_freq_bins,
        anthro_complete=sum(1 for s in ds.subjects if s.has_anthropometry),
        magnitude_mean_db=float(mags.mean()),
        magnitude_min_db=float(mags.min()),
        magnitude_max_db=float(mags.max()),
    )
