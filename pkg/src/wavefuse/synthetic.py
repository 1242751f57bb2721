"""Synthetic ventilator-like datasets for desk-scale experiments.

The generator emits a two-phase quasi-periodic waveform (a pressure-like
ramp-and-decay channel plus a flow-like signed channel) with exact
per-point phase labels, period-start boundary points, or injected
spike/dropout anomalies with their ground-truth mask. Everything is a
pure function of the config seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ingest import AnnotationSet, AuxSignal, Record
from .series import MultivariateSeries

__all__ = ["SynthConfig", "synth_dataset"]

INSPIRATION, EXPIRATION = 0, 1
CLASS_NAMES = ("inspiration", "expiration")

_MEDICATIONS = ("propofol", "fentanyl", "midazolam", "dexmedetomidine", "rocuronium")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic generator; defaults suit CI-scale runs."""

    n_records: int = 8
    n_points: int = 2048
    fs: float = 50.0
    n_channels: int = 2
    noise_sd: float = 0.02
    seed: int = 0
    period: int = 50
    period_jitter: int = 3
    rise_fraction: float = 0.3
    # anomaly task only
    n_anomalies: int = 8
    spike_amplitude: float = 8.0
    dropout_len: int = 12
    clean_fraction: float = 0.8

    def __post_init__(self):
        if self.n_records < 1 or self.n_points < 8 or self.n_channels < 1:
            raise ValueError("n_records, n_points, n_channels out of range")
        if self.fs <= 0 or self.noise_sd < 0:
            raise ValueError("fs must be positive and noise_sd non-negative")
        if self.period < 4 or self.period_jitter < 0:
            raise ValueError("period must be >= 4 with non-negative jitter")
        if not 0.0 < self.rise_fraction < 1.0:
            raise ValueError("rise_fraction must be in (0, 1)")
        if not 0.0 < self.clean_fraction < 1.0:
            raise ValueError("clean_fraction must be in (0, 1)")


def _breath_waveform(rng: np.random.Generator, cfg: SynthConfig):
    """One record's waveform, labels, and period-start boundaries."""
    T = cfg.n_points
    pressure = np.empty(T)
    flow = np.empty(T)
    labels = np.empty(T, dtype=int)
    boundaries = []
    t = 0
    while t < T:
        boundaries.append(t)
        period = cfg.period
        if cfg.period_jitter > 0:
            period += int(rng.integers(-cfg.period_jitter, cfg.period_jitter + 1))
        period = max(4, period)
        insp = max(2, int(round(cfg.rise_fraction * period)))
        exp = max(2, period - insp)

        n1 = min(insp, T - t)
        u = np.arange(n1) / insp
        pressure[t : t + n1] = 5.0 + 10.0 * u**0.8
        flow[t : t + n1] = 1.2 * np.sin(np.pi * (np.arange(n1) + 0.5) / insp)
        labels[t : t + n1] = INSPIRATION
        t += n1
        if t >= T:
            break

        n2 = min(exp, T - t)
        u = np.arange(n2) / exp
        pressure[t : t + n2] = 5.0 + 10.0 * np.exp(-4.0 * u)
        flow[t : t + n2] = -1.4 * np.exp(-5.0 * u)
        labels[t : t + n2] = EXPIRATION
        t += n2

    channels = [pressure, flow]
    for c in range(2, cfg.n_channels):
        channels.append(np.roll(flow, 3 * (c - 1)) * (0.5 + 0.25 * c))
    values = np.column_stack(channels[: cfg.n_channels])
    if cfg.noise_sd > 0:
        values = values + rng.normal(0.0, cfg.noise_sd, size=values.shape)
    return values, labels, np.asarray(boundaries, dtype=int)


def _inject_anomalies(rng: np.random.Generator, values: np.ndarray, cfg: SynthConfig):
    """Spikes and dropouts in-place; returns the affected point indices."""
    T, C = values.shape
    mask = np.zeros(T, dtype=bool)
    sd = values.std(axis=0)
    for k in range(cfg.n_anomalies):
        if k % 2 == 0:  # spike
            pos = int(rng.integers(0, T))
            ch = int(rng.integers(0, C))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            values[pos, ch] += sign * cfg.spike_amplitude * max(sd[ch], 1e-3)
            mask[pos] = True
        else:  # dropout: flatline a short run across all channels
            run = min(cfg.dropout_len, T - 1)
            start = int(rng.integers(0, T - run))
            values[start : start + run] = values[start]
            mask[start : start + run] = True
    return np.flatnonzero(mask)


def _patient_info(rng: np.random.Generator, record_id: str) -> dict:
    n_meds = int(rng.integers(1, 3))
    meds = sorted(rng.choice(_MEDICATIONS, size=n_meds, replace=False).tolist())
    return {
        "id": record_id,
        "age": int(rng.integers(1, 18)),
        "sex": "F" if rng.random() < 0.5 else "M",
        "medications": meds,
        "ventilation_mode": "pressure-control SIMV",
    }


def _aux_signals(rng: np.random.Generator, cfg: SynthConfig) -> dict[str, AuxSignal]:
    aux_fs = 0.5
    n = max(4, int(cfg.n_points / cfg.fs * aux_fs))
    base = float(rng.uniform(90.0, 140.0))
    drift = float(rng.uniform(-0.2, 0.2))
    hr = base + drift * np.arange(n) + rng.normal(0.0, 0.5, size=n)
    return {"heart_rate": AuxSignal(fs=aux_fs, values=np.round(hr, 2))}


def synth_dataset(task: str, config: SynthConfig) -> list[Record]:
    """Generate records for one task; deterministic for a given seed.

    semseg carries exact per-point phase labels, boundary carries the
    period-start indices, and anomaly keeps the first clean_fraction of
    records untouched while the rest receive injected spikes/dropouts
    recorded in their ground-truth annotations.
    """
    if task not in ("semseg", "boundary", "anomaly"):
        raise ValueError(f"unknown task {task!r}")
    cfg = config
    n_clean = int(math.floor(cfg.clean_fraction * cfg.n_records + 1e-9))
    feature_names = ("pressure", "flow", *(f"mix{c}" for c in range(2, cfg.n_channels)))
    records = []
    for i in range(cfg.n_records):
        rng = np.random.default_rng([cfg.seed, i])
        values, labels, boundaries = _breath_waveform(rng, cfg)
        record_id = f"{task}-{i:03d}"
        if task == "semseg":
            ann = AnnotationSet(kind="point_labels", payload=labels)
        elif task == "boundary":
            ann = AnnotationSet(kind="boundary_points", payload=boundaries)
        else:
            if i < n_clean:
                points = np.asarray([], dtype=int)
            else:
                points = _inject_anomalies(rng, values, cfg)
            ann = AnnotationSet(kind="anomaly_points", payload=points)
        series = MultivariateSeries(
            values=values,
            fs=cfg.fs,
            feature_names=feature_names[: cfg.n_channels],
            patient_id=record_id,
        )
        records.append(
            Record(
                series=series,
                annotations=ann,
                patient_info=_patient_info(rng, record_id),
                aux_signals=_aux_signals(rng, cfg),
            )
        )
    return records
