"""Experiment configuration: a versioned, validated, JSON-backed schema.

Every run persists its resolved config next to its outputs, and
re-running from that file reproduces the toy-backbone metrics exactly.
Only two values can be overridden from the environment: WAVEFUSE_OUT
(output root) and WAVEFUSE_SEED (seed).

Schema (version 1), with defaults:

  run_name            str   "run"       output directory name component
  out_root            str   "runs"      root directory for artifacts
  seed                int   0           global seed (init, shuffling, synth)
  task                str   "semseg"    semseg | boundary | anomaly
  method              str   "model"     "model" or a baseline method id
  baseline_params     dict  {}          parameters for the baseline method
  data_path           str?  null        directory of CSV records; when null,
                                        the synthetic generator is used
  synth               dict  {}          SynthConfig overrides (n_records, ...)
  dataset_name        str   "synthetic" key into the built-in dataset
                                        descriptions, or free text
  train_fraction      float 0.8         patient-level split fraction
  split_strategy      str?  null        default: anomaly_sorted for anomaly,
                                        random_by_patient otherwise
  window_len          int   256         points per window
  window_step         int   128         training window stride
  patch_len           int   16          patch length l
  stride              int   8           patch stride s
  backbone            str   "toy"       "toy" or a pretrained checkpoint name
  backbone_options    dict  {}          toy backbone constructor options
  d_patch             int   16          patch embedding width
  n_proto             int   32          prototype bank size
  n_heads             int   4           reprogrammer attention heads
  covariate_strategy  str   "concatenate"
  revin_affine        bool  false
  prompt_components   list  [dataset, patient, stats, task]
  task_instruction    str?  null        default instruction per task
  epochs              int   10
  learning_rate       float 1e-4
  batch_size          int   16
  val_fraction        float 0.2         held-out fraction of train windows
  n_classes           int   2           semseg class count
  anomaly_ratio       float 0.05        expected anomaly frequency
  boundary_min_distance int? null       null: 10th-percentile heuristic
  optimize_boundary_distance bool false scalar search on validation data
  boundary_tolerance  int   50          accuracy tolerance in samples
  make_plots          bool  true
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .encoder import STRATEGIES
from .prompt import COMPONENTS

__all__ = ["CONFIG_VERSION", "ExperimentConfig"]

CONFIG_VERSION = 1

TASKS = ("semseg", "boundary", "anomaly")
BASELINE_METHODS = {
    "semseg": ("threshold", "knn", "hmm"),
    "boundary": ("peak", "template"),
    "anomaly": ("quantile", "zscore", "rolling", "fft"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    run_name: str = "run"
    out_root: str = "runs"
    seed: int = 0
    task: str = "semseg"
    method: str = "model"
    baseline_params: dict = field(default_factory=dict)
    data_path: Optional[str] = None
    synth: dict = field(default_factory=dict)
    dataset_name: str = "synthetic"
    train_fraction: float = 0.8
    split_strategy: Optional[str] = None
    window_len: int = 256
    window_step: int = 128
    patch_len: int = 16
    stride: int = 8
    backbone: str = "toy"
    backbone_options: dict = field(default_factory=dict)
    d_patch: int = 16
    n_proto: int = 32
    n_heads: int = 4
    covariate_strategy: str = "concatenate"
    revin_affine: bool = False
    prompt_components: tuple[str, ...] = COMPONENTS
    task_instruction: Optional[str] = None
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 16
    val_fraction: float = 0.2
    n_classes: int = 2
    anomaly_ratio: float = 0.05
    boundary_min_distance: Optional[int] = None
    optimize_boundary_distance: bool = False
    boundary_tolerance: int = 50
    make_plots: bool = True

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"config version {self.version} != {CONFIG_VERSION}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.method != "model" and self.method not in BASELINE_METHODS[self.task]:
            raise ValueError(f"unknown method {self.method!r} for task {self.task!r}")
        if self.covariate_strategy not in STRATEGIES:
            raise ValueError(f"unknown covariate strategy {self.covariate_strategy!r}")
        bad = set(self.prompt_components) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown prompt components {sorted(bad)}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.window_len < self.patch_len:
            raise ValueError("window_len must be at least patch_len")
        if min(self.patch_len, self.stride, self.window_step) < 1:
            raise ValueError("patch_len, stride, window_step must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise ValueError("anomaly_ratio must be in (0, 1)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.split_strategy is not None and self.split_strategy not in (
            "random_by_patient",
            "anomaly_sorted",
        ):
            raise ValueError(f"unknown split strategy {self.split_strategy!r}")
        object.__setattr__(self, "prompt_components", tuple(self.prompt_components))

    # -- derived ---------------------------------------------------------

    @property
    def effective_split_strategy(self) -> str:
        if self.split_strategy is not None:
            return self.split_strategy
        return "anomaly_sorted" if self.task == "anomaly" else "random_by_patient"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prompt_components"] = list(self.prompt_components)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Path | str, apply_env: bool = True) -> "ExperimentConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        if apply_env:
            overrides = {}
            if os.environ.get("WAVEFUSE_OUT"):
                overrides["out_root"] = os.environ["WAVEFUSE_OUT"]
            if os.environ.get("WAVEFUSE_SEED"):
                overrides["seed"] = int(os.environ["WAVEFUSE_SEED"])
            if overrides:
                cfg = cfg.replace(**overrides)
        return cfg

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
