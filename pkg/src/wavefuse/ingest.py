"""Record loading, annotation sidecars, preprocessing, and splits.

Record format on disk (one record = up to four files):

  <record>.csv          header ``fs=<Hz>,features=<name1;name2;...>`` then
                        one comma-separated row of decimals per time point
  <record>.ann          first line ``kind=<point_labels|boundary_points|
                        anomaly_points>``; then one integer per line, or
                        one ``index,label`` pair per line for point_labels
  <record>.patient.json flat JSON map of patient-level information
  <record>.aux.json     named low-rate side signals:
                        ``{"heart_rate": {"fs": 0.5, "values": [...]}}``

Prediction sidecars written at evaluation time reuse the ``.ann`` format
so predictions can be diffed against ground truth directly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .series import MultivariateSeries

__all__ = [
    "AnnotationSet",
    "AuxSignal",
    "Record",
    "DatasetSplit",
    "load_record",
    "save_record",
    "read_annotations",
    "write_annotations",
    "downsample",
    "expand_anomaly_annotations",
    "make_split",
]

ANNOTATION_KINDS = ("point_labels", "boundary_points", "anomaly_points")


@dataclass(frozen=True)
class AnnotationSet:
    """Per-point class ids, or a sorted list of point indices."""

    kind: str
    payload: np.ndarray

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind {self.kind!r}")
        p = np.asarray(self.payload, dtype=int)
        if p.ndim != 1:
            raise ValueError("annotation payload must be 1-D")
        if self.kind != "point_labels" and p.size > 1 and np.any(np.diff(p) <= 0):
            raise ValueError("non-monotonic annotations")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)

    def validate_against(self, T: int) -> None:
        if self.kind == "point_labels":
            if self.payload.shape[0] != T:
                raise ValueError(
                    f"point_labels length {self.payload.shape[0]} != T={T}"
                )
        else:
            if self.payload.size and (self.payload[0] < 0 or self.payload[-1] >= T):
                raise ValueError("annotation out of range")


@dataclass(frozen=True)
class AuxSignal:
    """A named low-rate side signal (e.g. a 0.5 Hz heart-rate trend)."""

    fs: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 1:
            raise ValueError("aux signal must be non-empty")
        if self.fs <= 0:
            raise ValueError("aux fs must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass
class Record:
    """A series plus its task annotations and textual side information."""

    series: MultivariateSeries
    annotations: Optional[AnnotationSet] = None
    patient_info: dict = field(default_factory=dict)
    aux_signals: dict[str, AuxSignal] = field(default_factory=dict)

    @property
    def record_id(self) -> str:
        return self.series.patient_id

    def __post_init__(self):
        if self.annotations is not None:
            self.annotations.validate_against(self.series.n_points)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/test record id lists covering the input."""

    train_records: tuple[str, ...]
    test_records: tuple[str, ...]
    strategy: str

    def __post_init__(self):
        train, test = set(self.train_records), set(self.test_records)
        if train & test:
            raise ValueError("train and test records overlap")
        if not self.test_records or not self.train_records:
            raise ValueError("both split sides must be non-empty")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _parse_header(line: str) -> tuple[float, list[str]]:
    line = line.strip()
    if not line.startswith("fs="):
        raise ValueError(f"malformed header: {line!r}")
    try:
        fs_part, feat_part = line.split(",", 1)
        fs = float(fs_part[len("fs="):])
        if not feat_part.startswith("features="):
            raise ValueError
        names = feat_part[len("features="):].split(";")
    except ValueError as e:
        raise ValueError(f"malformed header: {line!r}") from e
    if not names or any(not n for n in names):
        raise ValueError("header must name every feature")
    return fs, names


def read_annotations(path: Path | str) -> AnnotationSet:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("kind="):
        raise ValueError(f"annotation file {path} missing kind header")
    kind = lines[0][len("kind="):].strip()
    body = [ln.strip() for ln in lines[1:] if ln.strip()]
    if kind == "point_labels":
        idx, lab = [], []
        for ln in body:
            i, l = ln.split(",")
            idx.append(int(i))
            lab.append(int(l))
        if idx != list(range(len(idx))):
            raise ValueError("point_labels must list every index 0..T-1 in order")
        return AnnotationSet(kind=kind, payload=np.asarray(lab, dtype=int))
    return AnnotationSet(kind=kind, payload=np.asarray([int(ln) for ln in body], dtype=int))


def write_annotations(path: Path | str, ann: AnnotationSet) -> None:
    lines = [f"kind={ann.kind}"]
    if ann.kind == "point_labels":
        lines += [f"{i},{int(l)}" for i, l in enumerate(ann.payload)]
    else:
        lines += [str(int(p)) for p in ann.payload]
    Path(path).write_text("\n".join(lines) + "\n")


def load_record(path: Path | str, format: str = "csv") -> Record:
    """Load one record with its sidecars; validates annotations against T."""
    if format == "wfdb_like":
        return _load_wfdb_like(path)
    if format != "csv":
        raise ValueError(f"unknown record format {format!r}")
    path = Path(path)
    with open(path) as f:
        fs, names = _parse_header(f.readline())
        values = np.loadtxt(f, delimiter=",", ndmin=2)
    series = MultivariateSeries(
        values=values, fs=fs, feature_names=tuple(names), patient_id=path.stem
    )
    ann = None
    ann_path = path.with_suffix(".ann")
    if ann_path.exists():
        ann = read_annotations(ann_path)
    patient = {}
    pat_path = path.with_suffix(".patient.json")
    if pat_path.exists():
        patient = json.loads(pat_path.read_text())
    aux = {}
    aux_path = path.with_suffix(".aux.json")
    if aux_path.exists():
        raw = json.loads(aux_path.read_text())
        aux = {k: AuxSignal(fs=v["fs"], values=np.asarray(v["values"])) for k, v in raw.items()}
    return Record(series=series, annotations=ann, patient_info=patient, aux_signals=aux)


def save_record(record: Record, directory: Path | str) -> Path:
    """Materialize a record (csv + sidecars) under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{record.record_id}.csv"
    s = record.series
    header = f"fs={s.fs:g},features={';'.join(s.feature_names)}"
    rows = "\n".join(",".join(format(x, ".9g") for x in row) for row in s.values)
    path.write_text(header + "\n" + rows + "\n")
    if record.annotations is not None:
        write_annotations(path.with_suffix(".ann"), record.annotations)
    if record.patient_info:
        path.with_suffix(".patient.json").write_text(
            json.dumps(record.patient_info, sort_keys=True, indent=2) + "\n"
        )
    if record.aux_signals:
        payload = {
            k: {"fs": v.fs, "values": [float(x) for x in v.values]}
            for k, v in record.aux_signals.items()
        }
        path.with_suffix(".aux.json").write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _load_wfdb_like(path: Path | str) -> Record:
    """Read a PhysioNet-style record via the optional wfdb package."""
    try:
        import wfdb  # noqa: F401
    except ImportError as e:
        raise ImportError(
            "reading PhysioNet records requires the optional 'wfdb' package; "
            "install it or convert to CSV with the `wavefuse convert` subcommand"
        ) from e
    rec = wfdb.rdrecord(str(path))
    series = MultivariateSeries(
        values=np.asarray(rec.p_signal, dtype=float),
        fs=float(rec.fs),
        feature_names=tuple(rec.sig_name),
        patient_id=Path(path).stem,
    )
    return Record(series=series)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def downsample(
    series: MultivariateSeries,
    target_fs: float,
    annotations: Optional[AnnotationSet] = None,
) -> tuple[MultivariateSeries, Optional[AnnotationSet]]:
    """Anti-aliased rate reduction to exactly floor(T * target_fs / fs) points.

    An 8th-order Butterworth low-pass at 0.45 * target_fs runs (forward-
    backward, zero phase) before the signal is re-sampled at the new
    sample times by linear interpolation. Annotation indices are rescaled
    by the rate ratio and rounded to nearest.
    """
    fs = series.fs
    if target_fs >= fs:
        raise ValueError(f"target_fs {target_fs} must be below fs {fs}")
    T = series.n_points
    T2 = int(math.floor(T * target_fs / fs))
    if T2 < 1:
        raise ValueError("series too short for the requested rate")
    sos = butter(8, 0.45 * target_fs, btype="low", fs=fs, output="sos")
    pad = 3 * (sos.shape[0] * 2 + 1)
    if T <= pad:
        raise ValueError(f"series too short to filter (need > {pad} points)")
    filtered = sosfiltfilt(sos, series.values, axis=0)
    t_old = np.arange(T) / fs
    t_new = np.arange(T2) / target_fs
    out = np.column_stack(
        [np.interp(t_new, t_old, filtered[:, c]) for c in range(series.n_channels)]
    )
    new_series = MultivariateSeries(
        values=out, fs=target_fs, feature_names=series.feature_names,
        patient_id=series.patient_id,
    )
    if annotations is None:
        return new_series, None
    ratio = target_fs / fs
    if annotations.kind == "point_labels":
        src = np.minimum(np.floor(np.arange(T2) / ratio + 0.5).astype(int), T - 1)
        new_ann = AnnotationSet(kind="point_labels", payload=annotations.payload[src])
    else:
        idx = np.floor(annotations.payload * ratio + 0.5).astype(int)
        idx = np.unique(np.clip(idx, 0, T2 - 1))
        new_ann = AnnotationSet(kind=annotations.kind, payload=idx)
    new_ann.validate_against(T2)
    return new_series, new_ann


def expand_anomaly_annotations(
    points: Sequence[int], fs: float, T: int, window_ms: float = 150.0
) -> np.ndarray:
    """Expand each annotation to +-window_ms around it, as a boolean mask.

    The half-window is floor(window_ms * fs / 1000) samples so the marked
    span never exceeds the stated duration; spans merge where they
    overlap and clip at the series bounds.
    """
    pts = np.asarray(sorted(points), dtype=int)
    if pts.size and (pts[0] < 0 or pts[-1] >= T):
        raise ValueError("annotation out of range")
    w = int(math.floor(window_ms * fs / 1000.0))
    mask = np.zeros(T, dtype=bool)
    for p in pts:
        mask[max(0, p - w) : min(T, p + w + 1)] = True
    return mask


def make_split(
    record_ids: Sequence[str],
    strategy: str,
    train_fraction: float,
    seed: int = 0,
    anomaly_counts: Optional[dict[str, int]] = None,
) -> DatasetSplit:
    """Partition record ids into train/test.

    random_by_patient shuffles with the seed, then cuts at
    floor(train_fraction * n). anomaly_sorted sorts ascending by anomaly
    count (ties by id) and assigns the lowest-count records to train.
    """
    ids = list(record_ids)
    n = len(ids)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train = int(math.floor(train_fraction * n + 1e-9))
    if n_train < 1 or n_train >= n:
        raise ValueError(
            f"train_fraction {train_fraction} leaves an empty split for {n} records"
        )
    if strategy == "random_by_patient":
        order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    elif strategy == "anomaly_sorted":
        if anomaly_counts is None:
            raise ValueError("anomaly_sorted requires anomaly_counts")
        order = sorted(ids, key=lambda r: (anomaly_counts[r], r))
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    return DatasetSplit(
        train_records=tuple(order[:n_train]),
        test_records=tuple(order[n_train:]),
        strategy=strategy,
    )
