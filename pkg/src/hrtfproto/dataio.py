"""HRTF dataset container, synthetic data, normalization, splits, merging.

The on-disk container (.hds) is byte-exact: ASCII magic, little-endian u32
header length, UTF-8 JSON header, then float32 little-endian payload holding
the source positions followed by each subject's magnitudes in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"HRTFDS01"
FORMAT_VERSION = 1
STD_EPS = 1e-8

ANTHRO_NAMES = (
    "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9",
    "x12", "x14", "x16", "x17",
    "d1", "d2", "d3", "d4", "d5", "d6", "d7", "d8",
    "theta1", "theta2",
)
NUM_ANTHRO = len(ANTHRO_NAMES)  # 23; lengths in cm, angles in degrees
# indices of length-valued entries (everything except the two angles)
_LENGTH_IDX = tuple(range(NUM_ANTHRO - 2))


class DatasetError(ValueError):
    """Invariant violation in an in-memory dataset."""


class DatasetFormatError(ValueError):
    """Malformed .hds container; message carries a byte offset when known."""


@dataclass
class AnthropometricVector:
    """The 23 per-ear parameters, fixed order per ANTHRO_NAMES."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (NUM_ANTHRO,):
            raise DatasetError(
                f"anthropometry must have {NUM_ANTHRO} entries, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DatasetError("anthropometry must be finite")

    def validate_strict(self):
        """Additionally require positive lengths (real measurement data)."""
        lengths = self.values[list(_LENGTH_IDX)]
        if np.any(lengths <= 0):
            raise DatasetError("length-valued anthropometric entries must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(np.array([d[name] for name in ANTHRO_NAMES], dtype=np.float64))

    def to_dict(self):
        return {name: float(v) for name, v in zip(ANTHRO_NAMES, self.values)}


@dataclass
class SubjectRecord:
    subject_id: str
    magnitudes_db: np.ndarray  # (B, 2L); per position: left L bins, right L bins
    anthropometry_left: AnthropometricVector | None = None
    anthropometry_right: AnthropometricVector | None = None

    def __post_init__(self):
        self.magnitudes_db = np.asarray(self.magnitudes_db, dtype=np.float32)

    @property
    def has_anthropometry(self):
        return self.anthropometry_left is not None and self.anthropometry_right is not None

    def anthropometry(self, ear):
        return self.anthropometry_left if ear == 0 else self.anthropometry_right


@dataclass
class HrtfDataset:
    dataset_id: str
    f_max_hz: float
    source_distance_m: float
    frequencies_hz: np.ndarray  # (L,), ascending
    positions: np.ndarray  # (B, 3) Cartesian meters: +x front, +y left, +z up
    subjects: list[SubjectRecord] = field(default_factory=list)

    def __post_init__(self):
        self.frequencies_hz = np.asarray(self.frequencies_hz, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float32)

    @property
    def num_subjects(self):
        return len(self.subjects)

    @property
    def num_positions(self):
        return self.positions.shape[0]

    @property
    def num_freq_bins(self):
        return self.frequencies_hz.shape[0]

    def validate(self):
        f = self.frequencies_hz
        if f.ndim != 1 or f.size < 1:
            raise DatasetError("frequency grid must be a non-empty vector")
        if np.any(np.diff(f) <= 0):
            raise DatasetError("frequencies must be strictly ascending")
        if f[-1] > self.f_max_hz * (1 + 1e-9):
            raise DatasetError("last frequency exceeds f_max_hz")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DatasetError("positions must be (B, 3)")
        radii = np.linalg.norm(self.positions.astype(np.float64), axis=1)
        r = self.source_distance_m
        if np.any(np.abs(radii - r) > 0.01 * r):
            raise DatasetError("all positions must lie within 1% of the source distance")
        b, l = self.num_positions, self.num_freq_bins
        for s in self.subjects:
            if s.magnitudes_db.shape != (b, 2 * l):
                raise DatasetError(
                    f"subject {s.subject_id}: magnitudes shape "
                    f"{s.magnitudes_db.shape} != ({b}, {2 * l})"
                )
            if not np.all(np.isfinite(s.magnitudes_db)):
                raise DatasetError(f"subject {s.subject_id}: non-finite magnitudes")
        return self

    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def subset(self, ids):
        index = {s.subject_id: s for s in self.subjects}
        missing = [i for i in ids if i not in index]
        if missing:
            raise DatasetError(f"unknown subject ids: {missing}")
        return HrtfDataset(
            dataset_id=self.dataset_id,
            f_max_hz=self.f_max_hz,
            source_distance_m=self.source_distance_m,
            frequencies_hz=self.frequencies_hz,
            positions=self.positions,
            subjects=[index[i] for i in ids],
        )


# ---------------------------------------------------------------------------
# container I/O


def write_dataset(ds: HrtfDataset, path):
    ds.validate()
    header = {
        "format_version": FORMAT_VERSION,
        "dataset_id": ds.dataset_id,
        "num_subjects": ds.num_subjects,
        "num_positions": ds.num_positions,
        "num_freq_bins": ds.num_freq_bins,
        "f_max_hz": float(ds.f_max_hz),
        "source_distance_m": float(ds.source_distance_m),
        "frequencies_hz": [float(x) for x in ds.frequencies_hz],
        "anthro_names": list(ANTHRO_NAMES),
        "subjects": [
            {
                "id": s.subject_id,
                "has_anthropometry": s.has_anthropometry,
                "anthropometry_left": (
                    [float(v) for v in s.anthropometry_left.values]
                    if s.anthropometry_left is not None else None
                ),
                "anthropometry_right": (
                    [float(v) for v in s.anthropometry_right.values]
                    if s.anthropometry_right is not None else None
                ),
            }
            for s in ds.subjects
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.positions, dtype="<f4").tobytes())
        for s in ds.subjects:
            fh.write(np.ascontiguousarray(s.magnitudes_db, dtype="<f4").tobytes())
    return path


def read_dataset(path) -> HrtfDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise DatasetFormatError(f"file too short ({len(raw)} bytes) for magic+header length")
    if raw[:8] != MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0: {raw[:8]!r} != {MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise DatasetFormatError(
            f"header declared {hlen} bytes at offset 12 but only {len(raw) - 12} remain"
        )
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"header JSON at offset 12 unparseable: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format_version {header.get('format_version')}")
    for key in ("dataset_id", "num_subjects", "num_positions", "num_freq_bins",
                "f_max_hz", "source_distance_m", "frequencies_hz", "subjects"):
        if key not in header:
            raise DatasetFormatError(f"header missing key {key!r}")
    s_count = header["num_subjects"]
    b = header["num_positions"]
    l = header["num_freq_bins"]
    if len(header["frequencies_hz"]) != l:
        raise DatasetFormatError(
            f"header declares {l} frequency bins but lists {len(header['frequencies_hz'])}"
        )
    if len(header["subjects"]) != s_count:
        raise DatasetFormatError(
            f"header declares {s_count} subjects but lists {len(header['subjects'])}"
        )
    offset = 12 + hlen
    need = (b * 3 + s_count * b * 2 * l) * 4
    have = len(raw) - offset
    if have != need:
        raise DatasetFormatError(
            f"payload at offset {offset}: expected {need} bytes, got {have}"
        )
    positions = np.frombuffer(raw, dtype="<f4", count=b * 3, offset=offset).reshape(b, 3).copy()
    offset += b * 3 * 4
    subjects = []
    for meta in header["subjects"]:
        mags = np.frombuffer(raw, dtype="<f4", count=b * 2 * l, offset=offset)
        mags = mags.reshape(b, 2 * l).copy()
        if not np.all(np.isfinite(mags)):
            raise DatasetFormatError(
                f"non-finite magnitudes for subject {meta['id']!r} at offset {offset}"
            )
        offset += b * 2 * l * 4
        left = right = None
        if meta.get("anthropometry_left") is not None:
            left = AnthropometricVector(np.array(meta["anthropometry_left"]))
        if meta.get("anthropometry_right") is not None:
            right = AnthropometricVector(np.array(meta["anthropometry_right"]))
        subjects.append(SubjectRecord(meta["id"], mags, left, right))
    ds = HrtfDataset(
        dataset_id=header["dataset_id"],
        f_max_hz=header["f_max_hz"],
        source_distance_m=header["source_distance_m"],
        frequencies_hz=np.array(header["frequencies_hz"], dtype=np.float64),
        positions=positions,
        subjects=subjects,
    )
    return ds.validate()


# ---------------------------------------------------------------------------
# synthetic spherical-head data

EAR_AXES = {0: np.array([0.0, 1.0, 0.0]), 1: np.array([0.0, -1.0, 0.0])}  # left, right
_X1_REF_CM = 17.5
_NOTCH_DEPTH_DB = -15.0
_NOTCH_WIDTH_HZ = 1000.0
_SHADOW_DB = -6.0
_SPEED_OF_SOUND = 343.0


def notch_frequency_hz(d8_cm: float) -> float:
    """Quarter-wave resonance of the concha depth d8 (cm)."""
    return _SPEED_OF_SOUND / (4.0 * d8_cm * 0.01)


def synthetic_magnitudes(x1_cm, d8_cm, positions, frequencies_hz, r, f_max_hz):
    """Log-magnitude surface of the two-feature spherical-head model.

    Depends only on (x1, d8, position, frequency): a head-shadow term scaled
    by head width and a pinna notch at the d8 quarter-wave frequency on the
    ipsilateral side. Returns (B, 2L) dB, left ear bins first per position.
    """
    pos = np.asarray(positions, dtype=np.float64)
    f = np.asarray(frequencies_hz, dtype=np.float64)
    u = pos / r
    f_n = notch_frequency_hz(d8_cm)
    out = np.empty((pos.shape[0], 2 * f.size), dtype=np.float32)
    for ear in (0, 1):
        cosg = u @ EAR_AXES[ear]  # (B,)
        shadow = (
            _SHADOW_DB * (f[None, :] / f_max_hz)
            * (1.0 - cosg[:, None]) * (x1_cm / _X1_REF_CM)
        )
        notch = (
            _NOTCH_DEPTH_DB
            * np.exp(-((f[None, :] - f_n) ** 2) / (2.0 * _NOTCH_WIDTH_HZ**2))
            * np.maximum(0.0, cosg[:, None])
        )
        out[:, ear * f.size : (ear + 1) * f.size] = shadow + notch
    return out


def synth_generate(seed, num_subjects, positions, frequencies_hz, r,
                   f_max_hz=20000.0, dataset_id="synthetic") -> HrtfDataset:
    """Deterministic synthetic dataset; x1 and d8 informative, rest inert."""
    rng = np.random.default_rng(seed)
    pos = np.asarray(positions, dtype=np.float32)
    subjects = []
    x1_idx = ANTHRO_NAMES.index("x1")
    d8_idx = ANTHRO_NAMES.index("d8")
    for i in range(num_subjects):
        x1 = rng.uniform(12.0, 18.0)
        d8 = rng.uniform(0.8, 2.0)
        values = rng.uniform(-1.0, 1.0, size=NUM_ANTHRO)
        values[x1_idx] = x1
        values[d8_idx] = d8
        anthro = AnthropometricVector(values)
        mags = synthetic_magnitudes(x1, d8, pos, frequencies_hz, r, f_max_hz)
        subjects.append(
            SubjectRecord(f"{dataset_id}-{i:03d}", mags, anthro,
                          AnthropometricVector(values.copy()))
        )
    ds = HrtfDataset(
        dataset_id=dataset_id,
        f_max_hz=f_max_hz,
        source_distance_m=r,
        frequencies_hz=np.asarray(frequencies_hz, dtype=np.float64),
        positions=pos,
        subjects=subjects,
    )
    return ds.validate()


def fibonacci_sphere(count, r=1.0):
    """Deterministic near-uniform grid of `count` points on a radius-r sphere."""
    i = np.arange(count, dtype=np.float64)
    golden = (1 + 5**0.5) / 2
    z = 1 - (2 * i + 1) / count
    theta = 2 * np.pi * i / golden
    rho = np.sqrt(np.maximum(0.0, 1 - z * z))
    return (r * np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)).astype(np.float32)


def frequency_grid(num_bins, f_max_hz=20000.0):
    """Uniform grid from 0 to f_max inclusive."""
    return np.linspace(0.0, f_max_hz, num_bins)


# ---------------------------------------------------------------------------
# z-score normalization


@dataclass
class NormalizationStats:
    """Per-feature mean/std with provenance; std floored at STD_EPS."""

    scope: str  # per_dataset_magnitude | global_anthro | global_prototype
    mean: np.ndarray
    std: np.ndarray
    source_dataset_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise DatasetError("mean/std shape mismatch")
        if np.any(self.std < STD_EPS):
            raise DatasetError("std entries must be >= eps")


def fit_normalizer(values, scope, source_dataset_ids=()) -> NormalizationStats:
    """Per-feature stats over axis 0 of the stacked samples (needs >= 2)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[0] < 2:
        raise DatasetError("normalizer needs at least 2 samples")
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0), STD_EPS)
    return NormalizationStats(scope, mean, std, list(source_dataset_ids))


def apply_normalizer(stats: NormalizationStats, values, inverse=False):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[-stats.mean.ndim:] != stats.mean.shape:
        raise DatasetError(
            f"value feature shape {arr.shape} incompatible with stats {stats.mean.shape}"
        )
    if inverse:
        return arr * stats.std + stats.mean
    return (arr - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# splits and merging


@dataclass
class SubjectSplit:
    train: HrtfDataset
    test: HrtfDataset
    ae_only: HrtfDataset


def split_subjects(ds: HrtfDataset, train_ids, test_ids, ae_only_ids=()) -> SubjectSplit:
    """Partition one dataset's subjects into disjoint train/test/ae-only views."""
    groups = [list(train_ids), list(test_ids), list(ae_only_ids)]
    flat = [i for g in groups for i in g]
    if len(set(flat)) != len(flat):
        seen, dupes = set(), set()
        for i in flat:
            (dupes if i in seen else seen).add(i)
        raise DatasetError(f"overlapping subject ids across partitions: {sorted(dupes)}")
    known = set(ds.subject_ids())
    unknown = sorted(set(flat) - known)
    if unknown:
        raise DatasetError(f"unknown subject ids: {unknown}")
    return SubjectSplit(*(ds.subset(g) for g in groups))


class MergedTrainingSet:
    """Union of datasets, each subject kept on its native source grid."""

    def __init__(self, datasets):
        datasets = list(datasets)
        if not datasets:
            raise DatasetError("nothing to merge")
        ref = datasets[0]
        for ds in datasets[1:]:
            if ds.num_freq_bins != ref.num_freq_bins:
                raise DatasetError(
                    f"cannot merge: {ds.dataset_id} has L={ds.num_freq_bins}, "
                    f"{ref.dataset_id} has L={ref.num_freq_bins}"
                )
            if abs(ds.f_max_hz - ref.f_max_hz) > 1e-6:
                raise DatasetError("cannot merge: f_max differs")
            if np.any(np.abs(ds.frequencies_hz - ref.frequencies_hz) > 1e-6):
                raise DatasetError("cannot merge: frequency grids differ")
        self.datasets = datasets

    @property
    def num_freq_bins(self):
        return self.datasets[0].num_freq_bins

    @property
    def f_max_hz(self):
        return self.datasets[0].f_max_hz

    @property
    def num_pairs(self):
        return sum(ds.num_subjects for ds in self.datasets)

    def pairs(self):
        """Every (dataset, subject) pair exactly once, in declaration order."""
        for ds in self.datasets:
            for subject in ds.subjects:
                yield ds, subject

    def shuffled_pairs(self, rng):
        items = list(self.pairs())
        order = rng.permutation(len(items))
        return [items[i] for i in order]

    def uses_single_grid(self):
        """True when all member datasets share one source grid."""
        ref = self.datasets[0]
        for ds in self.datasets[1:]:
            if ds.num_positions != ref.num_positions or not np.array_equal(
                ds.positions, ref.positions
            ):
                return False
        return True


def merge_datasets(datasets) -> MergedTrainingSet:
    return MergedTrainingSet(datasets)


def fit_magnitude_normalizers(merged: MergedTrainingSet) -> dict[str, NormalizationStats]:
    """Per-dataset stats over the 2L frequency-ear channels of training subjects."""
    out = {}
    for ds in merged.datasets:
        rows = np.concatenate([s.magnitudes_db for s in ds.subjects], axis=0)
        out[ds.dataset_id] = fit_normalizer(
            rows, "per_dataset_magnitude", [ds.dataset_id]
        )
    return out


def fit_anthro_normalizer(merged: MergedTrainingSet) -> NormalizationStats:
    """Pooled stats over every (subject, ear) anthropometry vector in training."""
    rows = []
    ids = []
    for ds in merged.datasets:
        ids.append(ds.dataset_id)
        for s in ds.subjects:
            if s.has_anthropometry:
                rows.append(s.anthropometry_left.values)
                rows.append(s.anthropometry_right.values)
    if len(rows) < 2:
        raise DatasetError("need at least 2 anthropometry vectors to fit stats")
    return fit_normalizer(np.stack(rows), "global_anthro", ids)
