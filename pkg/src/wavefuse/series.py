"""Core data model: multivariate series, patch geometry, segments, windows.

Everything here is an immutable value type shared by the rest of the
package. Indices are zero-based half-open throughout; the one-based
patch-start convention of the patching formula is converted here, once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MultivariateSeries",
    "PatchGrid",
    "Segment",
    "Window",
    "patch_indices",
    "assemble_segments",
    "flatten_segments",
    "window_series",
    "boundaries_to_segments",
]


@dataclass(frozen=True)
class MultivariateSeries:
    """A uniformly sampled T x C signal.

    values : (T, C) float array, every entry finite
    fs : sampling rate in Hz
    feature_names : C channel identifiers, in column order
    patient_id : record/patient identifier
    """

    values: np.ndarray
    fs: float
    feature_names: tuple[str, ...]
    patient_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("values must be a T x C matrix with T >= 1, C >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        names = tuple(self.feature_names)
        if len(names) != v.shape[1]:
            raise ValueError(
                f"feature_names has {len(names)} entries for {v.shape[1]} channels"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """Patch index set for a window of T points.

    Patch i covers points [i*stride, i*stride + patch_len), i = 0..n_patches-1.
    """

    patch_len: int
    stride: int
    n_patches: int

    @property
    def indices(self) -> range:
        return range(self.n_patches)

    def patch_start(self, i: int) -> int:
        if not 0 <= i < self.n_patches:
            raise IndexError(f"patch index {i} out of range [0, {self.n_patches})")
        return i * self.stride

    def patch_slice(self, i: int) -> slice:
        start = self.patch_start(i)
        return slice(start, start + self.patch_len)


@dataclass(frozen=True)
class Segment:
    """Half-open run [start, end) carrying an optional class label."""

    start: int
    end: int
    label: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment bounds [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Window:
    """A view onto `offset : offset+length` of a parent series.

    Carries aligned per-point label slices when the parent record has them.
    """

    series: MultivariateSeries
    offset: int
    length: int
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.length < 1 or self.offset < 0:
            raise ValueError("window offset/length must be non-negative/positive")
        if self.offset + self.length > self.series.n_points:
            raise ValueError(
                f"window [{self.offset}, {self.offset + self.length}) exceeds "
                f"series length {self.series.n_points}"
            )
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape[0] != self.length:
                raise ValueError("label slice must match window length")
            object.__setattr__(self, "labels", lab)

    @property
    def values(self) -> np.ndarray:
        return self.series.values[self.offset : self.offset + self.length]


def patch_indices(T: int, patch_len: int, stride: int) -> PatchGrid:
    """Patch grid for a window of T points: n = floor((T - l) / s) + 1.

    Rejects T < patch_len (window shorter than one patch) and
    non-positive patch_len or stride.
    """
    if patch_len < 1 or stride < 1:
        raise ValueError("patch_len and stride must be positive")
    if T < patch_len:
        raise ValueError(f"window shorter than patch (T={T} < l={patch_len})")
    n = (T - patch_len) // stride + 1
    return PatchGrid(patch_len=patch_len, stride=stride, n_patches=n)


def assemble_segments(labels: Sequence[int] | np.ndarray) -> list[Segment]:
    """Group a per-point label sequence into maximal constant-label runs.

    The returned segments partition [0, len(labels)) and consecutive
    segments always carry different labels.
    """
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] < 1:
        raise ValueError("labels must be a non-empty 1-D sequence")
    change = np.flatnonzero(lab[1:] != lab[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [lab.shape[0]]))
    return [Segment(int(a), int(b), int(lab[a])) for a, b in zip(starts, ends)]


def flatten_segments(segments: Sequence[Segment]) -> np.ndarray:
    """Inverse of assemble_segments: expand segments to a label array."""
    if not segments:
        raise ValueError("no segments to flatten")
    n = segments[-1].end
    out = np.empty(n, dtype=int)
    for seg in segments:
        out[seg.start : seg.end] = seg.label if seg.label is not None else -1
    return out


def window_series(
    series: MultivariateSeries,
    length: int,
    step: int,
    labels: Optional[np.ndarray] = None,
) -> list[Window]:
    """Cut a series into windows at offsets 0, step, 2*step, ...

    A trailing window that would extend past the end is dropped rather
    than padded, so patch arithmetic stays exact downstream.
    """
    if length < 1 or step < 1:
        raise ValueError("length and step must be positive")
    T = series.n_points
    if length > T:
        raise ValueError(f"window length {length} exceeds series length {T}")
    if labels is not None and np.asarray(labels).shape[0] != T:
        raise ValueError("labels must have one entry per series point")
    out = []
    for off in range(0, T - length + 1, step):
        sl = None if labels is None else np.asarray(labels)[off : off + length]
        out.append(Window(series=series, offset=off, length=length, labels=sl))
    return out


def boundaries_to_segments(points: Sequence[int], T: int) -> list[Segment]:
    """Spans between consecutive boundary points, closed by the window edges.

    Boundary points at 0 or T do not create empty segments.
    """
    if T < 1:
        raise ValueError("T must be positive")
    pts = sorted(int(p) for p in points)
    if any(p < 0 or p > T for p in pts):
        raise ValueError("boundary point out of range")
    edges = [0] + [p for p in pts if 0 < p < T] + [T]
    return [Segment(a, b) for a, b in zip(edges[:-1], edges[1:]) if a < b]
