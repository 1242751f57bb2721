"""Textual context construction.

The context string has four components rendered in a fixed order:
dataset description, patient information (as JSON), summary statistics
of low-rate side signals, and the task instruction. Each component can
be toggled independently for the prompt ablation arms; rendering is
byte-deterministic (sorted JSON keys, fixed separators, 6 significant
digits for statistics).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ingest import AuxSignal

__all__ = [
    "COMPONENTS",
    "DATASET_DESCRIPTIONS",
    "TASK_INSTRUCTIONS",
    "PromptContext",
    "encode_patient_json",
    "summarize_low_freq",
    "build_prompt",
]

COMPONENTS = ("dataset", "patient", "stats", "task")

DATASET_DESCRIPTIONS = {
    "ventilator": (
        "The dataset contains time series data of airway pressure and flow rate "
        "measurements collected from a mechanical ventilator during the "
        "respiratory support of a fully sedated patient. The data is sampled at "
        "a frequency of 100 Hz. The airway pressure is measured in cmH2O and "
        "the flow rate is measured in L/min."
    ),
    "ludb": (
        "LUDB is an ECG signal database collected from subjects with various "
        "cardiovascular diseases used for ECG delineation. Cardiologists "
        "manually annotated boundaries of P, T waves and QRS complexes. Each "
        "clip consists of a 10-second signal from a single ECG lead, sampled "
        "at 500 Hz."
    ),
    "bidmc": (
        "The BIDMC dataset is a dataset of electrocardiogram (ECG), pulse "
        "oximetry, photoplethysmogram (PPG) and impedance pneumography "
        "respiratory signals acquired from intensive care patients. Two "
        "annotators manually annotated individual breaths in each recording "
        "using the impedance respiratory signal."
    ),
    "mitbih": (
        "The MIT-BIH Arrhythmia Database contains excerpts of two-channel "
        "ambulatory ECG from a mixed population of inpatients and outpatients, "
        "digitized at 360 samples per second per channel with 11-bit "
        "resolution over a 10 mV range."
    ),
    "synthetic": (
        "The dataset contains synthetic ventilator-like waveforms with a "
        "pressure channel that ramps during inspiration and decays during "
        "expiration, and a signed flow channel that is positive while air "
        "flows in and negative while it flows out. Breath lengths vary "
        "slightly around a fixed period."
    ),
}

TASK_INSTRUCTIONS = {
    "semseg": (
        "Classify every one of the past {window} steps of data as inspiration "
        "or expiration to segment the sequence."
    ),
    "boundary": "Identify the change points in the past {window} steps of data to segment the sequence.",
    "anomaly": (
        "Reconstruct the past {window} steps of data as closely as possible; "
        "deviations from the reconstruction indicate anomalies."
    ),
}


@dataclass(frozen=True)
class PromptContext:
    """The four context components and which of them are enabled."""

    dataset_desc: str = ""
    patient_info: Mapping = field(default_factory=dict)
    stats: Sequence[tuple[str, str, object]] = ()
    task_instruction: str = ""
    enabled: frozenset[str] = frozenset(COMPONENTS)

    def __post_init__(self):
        extra = set(self.enabled) - set(COMPONENTS)
        if extra:
            raise ValueError(f"unknown prompt components {sorted(extra)}")
        object.__setattr__(self, "enabled", frozenset(self.enabled))


def encode_patient_json(patient_info: Mapping) -> str:
    """Patient-level data as JSON with lexicographically sorted keys.

    Values must be scalars, strings, or flat lists thereof; anything
    nested further is rejected so the encoding stays one level deep.
    """
    def _check_scalar(v, key):
        if not (v is None or isinstance(v, (bool, int, float, str))):
            raise ValueError(f"patient field {key!r} must be scalar, string, or flat list")

    for key, value in patient_info.items():
        if isinstance(value, (list, tuple)):
            for item in value:
                _check_scalar(item, key)
        else:
            _check_scalar(value, key)
    return json.dumps(dict(patient_info), sort_keys=True)


def _trend(values: np.ndarray) -> str:
    if values.size < 2:
        return "flat"
    slope = np.polyfit(np.arange(values.size), values, 1)[0]
    if slope > 1e-6:
        return "rising"
    if slope < -1e-6:
        return "falling"
    return "flat"


def summarize_low_freq(
    signals: Mapping[str, AuxSignal], fs_threshold: float = 1.0
) -> list[tuple[str, str, object]]:
    """min/max/mean/trend statistics for low-rate complementary signals.

    Every signal must be sampled below fs_threshold; high-rate channels
    belong in the time-series path, not the text prompt.
    """
    stats: list[tuple[str, str, object]] = []
    for name in sorted(signals):
        sig = signals[name]
        if sig.fs >= fs_threshold:
            raise ValueError(
                f"signal {name!r} at {sig.fs} Hz is not below {fs_threshold} Hz"
            )
        v = np.asarray(sig.values, dtype=float)
        if v.size == 0:
            raise ValueError(f"signal {name!r} is empty")
        stats += [
            (name, "min", float(v.min())),
            (name, "max", float(v.max())),
            (name, "mean", float(v.mean())),
            (name, "trend", _trend(v)),
        ]
    return stats


def _render_stats(stats: Sequence[tuple[str, str, object]]) -> str:
    lines = []
    for name, stat, value in stats:
        text = value if isinstance(value, str) else format(float(value), ".6g")
        lines.append(f"{name} {stat}: {text}")
    return "\n".join(lines)


def build_prompt(ctx: PromptContext) -> str:
    """Concatenate the enabled components in the fixed order.

    Components are separated by single newlines; an empty enabled set
    yields the empty string (the no-prompt ablation arm).
    """
    rendered = {
        "dataset": ctx.dataset_desc,
        "patient": encode_patient_json(ctx.patient_info),
        "stats": _render_stats(ctx.stats),
        "task": ctx.task_instruction,
    }
    parts = [rendered[c] for c in COMPONENTS if c in ctx.enabled]
    return "\n".join(parts)
