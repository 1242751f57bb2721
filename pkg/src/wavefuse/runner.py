"""Experiment orchestration: dataset assembly, training, evaluation, sweeps.

A run writes everything needed to reproduce and inspect it into one
directory: the resolved config, a per-epoch loss log, the best
checkpoint (flat npz map of the trainable tensors, with a format
version), per-record prediction sidecars in the annotation format,
metric reports (flat text plus JSON rows), and overlay plots. The
frozen-backbone hash is checked at every epoch boundary and any change
aborts the run.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import ProjectionHead, build_backbone
from .baselines import baseline_anomaly, baseline_boundary, baseline_semseg
from .config import ExperimentConfig
from .encoder import TimeSeriesEncoder
from .ingest import AnnotationSet, Record, load_record, make_split, write_annotations
from .metrics import (
    MetricReport,
    accuracy_at_iou,
    auroc,
    boundary_accuracy,
    boundary_mae,
    period_adjusted_prf,
    pointwise_f1,
    segment_miou,
)
from .model import FusionModel, head_outputs_for
from .prompt import DATASET_DESCRIPTIONS, TASK_INSTRUCTIONS, PromptContext, build_prompt, summarize_low_freq
from .series import assemble_segments, boundaries_to_segments, window_series
from .synthetic import SynthConfig, synth_dataset
from .tasks import (
    anomaly_scores,
    anomaly_threshold,
    apply_threshold,
    channel_score_variance,
    distance_heuristic,
    find_boundaries,
    optimize_distance,
    semseg_decide,
    semseg_loss,
)

__all__ = [
    "RunArtifacts",
    "load_dataset",
    "split_records",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "evaluate",
    "sweep",
    "PROMPT_ARMS",
    "COVARIATE_ARMS",
]

CHECKPOINT_VERSION = 1

COVARIATE_ARMS = (
    "concatenate",
    "interleave",
    "average_weighted",
    "average_unweighted",
    "independent",
)

PROMPT_ARMS = (
    ("no_prompt", ()),
    ("dataset_only", ("dataset",)),
    ("task_only", ("task",)),
    ("patient_only", ("patient",)),
    ("stats_only", ("stats",)),
    ("all", ("dataset", "patient", "stats", "task")),
)


@dataclass
class RunArtifacts:
    run_dir: Path
    config: ExperimentConfig
    checkpoint_path: Optional[Path]
    backbone_hash: str
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    reports: dict[str, MetricReport] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def load_dataset(config: ExperimentConfig) -> list[Record]:
    """Records from disk (data_path) or the synthetic generator."""
    if config.data_path is not None:
        paths = sorted(Path(config.data_path).glob("*.csv"))
        if not paths:
            raise ValueError(f"no CSV records under {config.data_path}")
        return [load_record(p) for p in paths]
    synth_args = dict(config.synth)
    synth_args.setdefault("seed", config.seed)
    return synth_dataset(config.task, SynthConfig(**synth_args))


def split_records(records: Sequence[Record], config: ExperimentConfig):
    ids = [r.record_id for r in records]
    counts = None
    if config.effective_split_strategy == "anomaly_sorted":
        counts = {r.record_id: int(r.annotations.payload.size) for r in records}
    split = make_split(
        ids, config.effective_split_strategy, config.train_fraction,
        seed=config.seed, anomaly_counts=counts,
    )
    by_id = {r.record_id: r for r in records}
    train = [by_id[i] for i in split.train_records]
    test = [by_id[i] for i in split.test_records]
    return train, test


def _point_labels(record: Record, task: str) -> np.ndarray:
    """Per-point training targets derived from the record annotations."""
    T = record.series.n_points
    payload = record.annotations.payload
    if task == "semseg":
        return payload
    out = np.zeros(T, dtype=int)
    out[payload] = 1
    return out


def _dataset_description(config: ExperimentConfig) -> str:
    return DATASET_DESCRIPTIONS.get(config.dataset_name, config.dataset_name)


def _prompt_text(record: Record, config: ExperimentConfig) -> str:
    low_rate = {k: v for k, v in record.aux_signals.items() if v.fs < 1.0}
    instruction = config.task_instruction or TASK_INSTRUCTIONS[config.task].format(
        window=config.window_len
    )
    ctx = PromptContext(
        dataset_desc=_dataset_description(config),
        patient_info=record.patient_info,
        stats=summarize_low_freq(low_rate) if low_rate else (),
        task_instruction=instruction,
        enabled=frozenset(config.prompt_components),
    )
    return build_prompt(ctx)


def _prompt_embeddings(records, config, backbone, reserve):
    out = {}
    for rec in records:
        emb, n_text = backbone.embed_text(_prompt_text(rec, config), reserve=reserve)
        out[rec.record_id] = (emb, n_text)
    return out


@dataclass
class _Bundle:
    """All windows of one record as ready-to-batch tensors."""

    record: Record
    x: torch.Tensor  # (n, T, C)
    y: Optional[np.ndarray]  # (n, T) targets, None for anomaly
    offsets: list[int]
    prompt: Optional[tuple[torch.Tensor, int]] = None


def _bundle(record: Record, config: ExperimentConfig, step: int, with_labels=True) -> _Bundle:
    labels = _point_labels(record, config.task) if with_labels else None
    windows = window_series(record.series, config.window_len, step, labels=labels)
    if not windows:
        raise ValueError(f"record {record.record_id} shorter than one window")
    x = torch.tensor(np.stack([w.values for w in windows]), dtype=torch.float32)
    y = None
    if with_labels and config.task != "anomaly":
        y = np.stack([w.labels for w in windows])
    return _Bundle(record=record, x=x, y=y, offsets=[w.offset for w in windows])


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------

def build_model(config: ExperimentConfig, n_channels: int) -> FusionModel:
    backbone = build_backbone(config.backbone, seed=config.seed, **config.backbone_options)
    encoder = TimeSeriesEncoder(
        n_channels=n_channels,
        window_len=config.window_len,
        patch_len=config.patch_len,
        stride=config.stride,
        d_patch=config.d_patch,
        d_llm=backbone.d_model,
        embedding_table=backbone.embedding_table(),
        strategy=config.covariate_strategy,
        n_proto=config.n_proto,
        n_heads=config.n_heads,
        revin_affine=config.revin_affine,
    )
    n_positions = (
        encoder.n_patches
        if config.covariate_strategy == "independent"
        else encoder.sequence_length()
    )
    head = ProjectionHead(
        n_positions,
        backbone.d_model,
        config.window_len,
        head_outputs_for(config.task, config.n_classes, n_channels),
    )
    return FusionModel(backbone, encoder, head)


def _trainable_state(model: FusionModel) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().copy()
        for name, p in model.named_parameters()
        if p.requires_grad
    }


def save_checkpoint(model: FusionModel, path: Path | str) -> Path:
    """Flat npz map of the trainable tensors plus a format version."""
    path = Path(path)
    np.savez(path, __format_version__=np.array([CHECKPOINT_VERSION]), **_trainable_state(model))
    return path


def load_checkpoint(model: FusionModel, path: Path | str) -> None:
    data = np.load(path)
    if "__format_version__" not in data.files:
        raise ValueError("not a checkpoint: missing format version")
    if int(data["__format_version__"][0]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['__format_version__'][0]}")
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    names = set(data.files) - {"__format_version__"}
    if names != set(params):
        raise ValueError("checkpoint/config mismatch: parameter names differ")
    for name in names:
        arr = data[name]
        if tuple(arr.shape) != tuple(params[name].shape):
            raise ValueError(
                f"checkpoint/config mismatch: {name} has shape {arr.shape}, "
                f"model expects {tuple(params[name].shape)}"
            )
    with torch.no_grad():
        for name in names:
            params[name].copy_(torch.from_numpy(data[name]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_loss(model, config, x, y, text_emb) -> torch.Tensor:
    raw = model(x, text_emb)
    if config.task == "anomaly":
        target = (x - model.encoder.revin.mean) / model.encoder.revin.std
        return torch.nn.functional.mse_loss(raw, target)
    flat = raw.reshape(-1, raw.shape[-1])
    labels = torch.as_tensor(y.reshape(-1))
    return semseg_loss(flat, labels)


def _epoch_pass(model, config, bundles, index_sets, opt=None, rng=None):
    total, count = 0.0, 0
    order = range(len(bundles))
    if rng is not None:
        order = rng.permutation(len(bundles))
    for bi in order:
        bundle = bundles[bi]
        idx = np.asarray(index_sets[bi], dtype=int)
        if idx.size == 0:
            continue
        if rng is not None:
            idx = idx[rng.permutation(idx.size)]
        text_emb, _ = bundle.prompt
        for start in range(0, idx.size, config.batch_size):
            sel = idx[start : start + config.batch_size]
            x = bundle.x[sel]
            y = None if bundle.y is None else bundle.y[sel]
            if opt is not None:
                loss = _batch_loss(model, config, x, y, text_emb)
                opt.zero_grad()
                loss.backward()
                opt.step()
            else:
                with torch.no_grad():
                    loss = _batch_loss(model, config, x, y, text_emb)
            total += loss.item() * len(sel)
            count += len(sel)
    return total / max(count, 1)


def train(config: ExperimentConfig) -> RunArtifacts:
    """Train the heads against the frozen backbone and evaluate the result."""
    if config.method != "model":
        raise ValueError("baseline methods have no training phase; use evaluate()")
    torch.manual_seed(config.seed)
    run_dir = Path(config.out_root) / config.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")

    records = load_dataset(config)
    train_recs, test_recs = split_records(records, config)
    n_channels = train_recs[0].series.n_channels
    model = build_model(config, n_channels)
    hash0 = model.backbone.parameter_hash()

    reserve = model.encoder.sequence_length()
    prompts = _prompt_embeddings(records, config, model.backbone, reserve)
    bundles = []
    for rec in train_recs:
        b = _bundle(rec, config, step=config.window_step)
        b.prompt = prompts[rec.record_id]
        bundles.append(b)

    # deterministic window-level train/val split within the training records
    split_rng = np.random.default_rng([config.seed, 777])
    train_idx, val_idx = [], []
    for b in bundles:
        n = b.x.shape[0]
        perm = split_rng.permutation(n)
        n_val = int(math.floor(config.val_fraction * n))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])

    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    log_lines = [f"backbone_hash={hash0}"]
    train_losses, val_losses = [], []
    best_state = _trainable_state(model)
    best_val = float("inf")

    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        tr = _epoch_pass(model, config, bundles, train_idx, opt=opt, rng=rng)
        has_val = any(len(v) for v in val_idx)
        va = _epoch_pass(model, config, bundles, val_idx) if has_val else tr
        train_losses.append(tr)
        val_losses.append(va)
        if model.backbone.parameter_hash() != hash0:
            raise RuntimeError("frozen backbone modified during training; aborting")
        if va < best_val:
            best_val = va
            best_state = _trainable_state(model)
        log_lines.append(f"epoch={epoch} train_loss={tr:.6f} val_loss={va:.6f}")

    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.requires_grad:
                p.copy_(torch.from_numpy(best_state[name]))
    checkpoint_path = run_dir / "checkpoint.npz"
    save_checkpoint(model, checkpoint_path)

    reports = evaluate(config, run_dir=run_dir, _model=model, _records=records)
    (run_dir / "log.txt").write_text("\n".join(log_lines) + "\n")
    return RunArtifacts(
        run_dir=run_dir,
        config=config,
        checkpoint_path=checkpoint_path,
        backbone_hash=hash0,
        train_losses=train_losses,
        val_losses=val_losses,
        reports=reports,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _predict_record(model, config, record, prompts) -> tuple[np.ndarray, np.ndarray, int]:
    """Tile the record with non-overlapping windows and stitch the outputs.

    Returns (raw predictions (L, K), raw window values (L, C), covered length).
    """
    bundle = _bundle(record, config, step=config.window_len, with_labels=False)
    text_emb, _ = prompts[record.record_id]
    with torch.no_grad():
        raw = model(bundle.x, text_emb)
    L = raw.shape[0] * raw.shape[1]
    return (
        raw.reshape(L, raw.shape[-1]).numpy(),
        bundle.x.reshape(L, bundle.x.shape[-1]).numpy(),
        L,
    )


def _reconstruction_errors(model, config, bundle) -> np.ndarray:
    """Denormalized reconstruction errors (n*T, C) for one window bundle."""
    text_emb, _ = bundle.prompt
    with torch.no_grad():
        raw = model(bundle.x, text_emb)
        recon = model.denormalize(raw)
    err = (bundle.x - recon).reshape(-1, bundle.x.shape[-1]).numpy()
    return err


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _aggregate(reports: dict[str, MetricReport], task: str) -> MetricReport:
    keys = sorted({k for r in reports.values() for k in r.values})
    values = {}
    for k in keys:
        vals = [r.values[k] for r in reports.values() if r.values.get(k) is not None]
        values[k] = float(np.mean(vals)) if vals else None
    agg = MetricReport(task=task, values=values)
    agg.diagnostics["n_records"] = len(reports)
    return agg


def _semseg_report(pred_labels, gt_labels) -> MetricReport:
    pred_segs = assemble_segments(pred_labels)
    gt_segs = assemble_segments(gt_labels)
    return MetricReport(
        task="semseg",
        values={
            "f1": pointwise_f1(pred_labels, gt_labels),
            "miou": segment_miou(pred_segs, gt_segs),
            "accuracy_at_075_iou": accuracy_at_iou(pred_segs, gt_segs),
        },
    )


def _boundary_report(pred_points, gt_points, length, tol) -> MetricReport:
    values = {"n_pred": float(len(pred_points))}
    if len(gt_points) == 0:
        values.update({"mae": None, "accuracy_at_tol": None, "miou": None,
                       "accuracy_at_075_iou": None})
    else:
        pred_segs = boundaries_to_segments(pred_points, length)
        gt_segs = boundaries_to_segments(gt_points, length)
        values.update({
            "mae": boundary_mae(pred_points, gt_points),
            "accuracy_at_tol": boundary_accuracy(pred_points, gt_points, tol=tol),
            "miou": segment_miou(pred_segs, gt_segs, class_matched=False),
            "accuracy_at_075_iou": accuracy_at_iou(pred_segs, gt_segs, class_matched=False),
        })
    return MetricReport(task="boundary", values=values)


def _anomaly_report(scores, mask, gt_mask) -> MetricReport:
    precision, recall, f1 = period_adjusted_prf(mask, gt_mask)
    return MetricReport(
        task="anomaly",
        values={
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "auroc": auroc(scores, gt_mask),
            "flagged_fraction": float(np.mean(mask)),
        },
    )


def _resolve_min_distance(config, model, train_bundles) -> int:
    if config.boundary_min_distance is not None:
        return int(config.boundary_min_distance)
    gaps = np.concatenate([
        np.diff(b.record.annotations.payload)
        for b in train_bundles
        if b.record.annotations.payload.size >= 2
    ])
    h = distance_heuristic(gaps)
    if not config.optimize_boundary_distance or model is None:
        return h
    # scalar search on the training data around the heuristic
    scores_parts, gt_parts, offset = [], [], 0
    prompts = {b.record.record_id: b.prompt for b in train_bundles}
    for b in train_bundles:
        raw, _, L = _predict_record(model, config, b.record, prompts)
        scores_parts.append(_sigmoid(raw[:, 0]))
        pts = b.record.annotations.payload
        gt_parts.append(pts[pts < L] + offset)
        offset += L
    scores = np.concatenate(scores_parts)
    gt = np.concatenate(gt_parts)
    if gt.size == 0:
        return h

    def metric(pred, gt_pts):
        segs_p = boundaries_to_segments(pred, scores.size)
        segs_g = boundaries_to_segments(gt_pts, scores.size)
        return segment_miou(segs_p, segs_g, class_matched=False)

    lo = max(1, h // 2)
    hi = max(2 * h, h + 5)
    return optimize_distance(scores, gt, metric, (lo, hi))


def _write_sidecar(run_dir, record_id, kind, payload):
    side_dir = run_dir / "predictions"
    side_dir.mkdir(exist_ok=True)
    write_annotations(side_dir / f"{record_id}.ann", AnnotationSet(kind, payload))


def evaluate(
    config: ExperimentConfig,
    checkpoint: Optional[Path | str] = None,
    run_dir: Optional[Path | str] = None,
    _model: Optional[FusionModel] = None,
    _records: Optional[list[Record]] = None,
) -> dict[str, MetricReport]:
    """Full inference over the test split; writes sidecars/reports/plots.

    Baseline methods bypass the neural path entirely; otherwise the model
    comes from `checkpoint` (or is passed in directly after training).
    """
    records = _records if _records is not None else load_dataset(config)
    train_recs, test_recs = split_records(records, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.json")

    if config.method != "model":
        reports = _evaluate_baseline(config, train_recs, test_recs, run_dir)
    else:
        model = _model
        if model is None:
            model = build_model(config, train_recs[0].series.n_channels)
            if checkpoint is None:
                raise ValueError("evaluate needs a checkpoint (or fresh artifacts from train)")
            load_checkpoint(model, checkpoint)
        model.eval()
        reports = _evaluate_model(config, model, records, train_recs, test_recs, run_dir)

    agg = _aggregate({k: v for k, v in reports.items()}, config.task)
    reports["aggregate"] = agg
    if run_dir is not None:
        agg.save(run_dir / "metrics.txt", run_dir / "metrics.json")
        rows = {rid: r.to_row() for rid, r in reports.items()}
        (run_dir / "metrics_per_record.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True, default=str) + "\n"
        )
    return reports


def _evaluate_model(config, model, records, train_recs, test_recs, run_dir):
    reserve = model.encoder.sequence_length()
    prompts = _prompt_embeddings(records, config, model.backbone, reserve)
    reports: dict[str, MetricReport] = {}
    n_text = {rec.record_id: prompts[rec.record_id][1] for rec in test_recs}

    min_distance = None
    v_c = None
    thr = None
    if config.task == "boundary":
        train_bundles = []
        for rec in train_recs:
            b = _bundle(rec, config, step=config.window_step)
            b.prompt = prompts[rec.record_id]
            train_bundles.append(b)
        min_distance = _resolve_min_distance(config, model, train_bundles)
    if config.task == "anomaly":
        # calibrate the score normalizer and threshold on held-out clean
        # windows from the training records
        errors = []
        rng = np.random.default_rng([config.seed, 777])
        for rec in train_recs:
            b = _bundle(rec, config, step=config.window_step, with_labels=False)
            n = b.x.shape[0]
            perm = rng.permutation(n)
            n_val = max(1, int(math.floor(config.val_fraction * n)))
            sel = perm[:n_val]
            sub = _Bundle(
                record=rec, x=b.x[sel], y=None,
                offsets=[b.offsets[i] for i in sel],
                prompt=prompts[rec.record_id],
            )
            errors.append(_reconstruction_errors(model, config, sub))
        err_all = np.vstack(errors)
        v_c = channel_score_variance(err_all)
        val_scores = np.mean(err_all**2 / v_c, axis=1)
        thr = anomaly_threshold(val_scores, config.anomaly_ratio)

    for rec in test_recs:
        raw, x_raw, L = _predict_record(model, config, rec, prompts)
        if config.task == "semseg":
            pred = semseg_decide(raw)
            gt = rec.annotations.payload[:L]
            rep = _semseg_report(pred, gt)
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "point_labels", pred)
        elif config.task == "boundary":
            scores = _sigmoid(raw[:, 0])
            pred_pts = find_boundaries(scores, min_distance)
            gt_pts = rec.annotations.payload
            gt_pts = gt_pts[gt_pts < L]
            rep = _boundary_report(pred_pts, gt_pts, L, config.boundary_tolerance)
            rep.values["min_distance"] = float(min_distance)
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "boundary_points", pred_pts)
        else:
            bundle = _bundle(rec, config, step=config.window_len, with_labels=False)
            bundle.prompt = prompts[rec.record_id]
            err = _reconstruction_errors(model, config, bundle)
            scores = np.mean(err**2 / v_c, axis=1)
            mask = apply_threshold(scores, thr)
            gt_mask = np.zeros(rec.series.n_points, dtype=bool)
            gt_mask[rec.annotations.payload] = True
            gt_mask = gt_mask[: scores.size]
            rep = _anomaly_report(scores, mask, gt_mask)
            rep.values["threshold"] = thr.threshold
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "anomaly_points", np.flatnonzero(mask))
        rep.diagnostics["n_text"] = n_text[rec.record_id]
        rep.diagnostics["n_patch_positions"] = model.encoder.sequence_length()
        reports[rec.record_id] = rep
        if run_dir is not None and config.make_plots:
            _plot_record(run_dir, config, rec, reports[rec.record_id], raw, L)
    return reports


def _evaluate_baseline(config, train_recs, test_recs, run_dir):
    reports: dict[str, MetricReport] = {}
    params = dict(config.baseline_params)
    for rec in test_recs:
        T = rec.series.n_points
        if config.task == "semseg":
            labels = baseline_semseg(rec.series, config.method, params, train_recs)
            rep = _semseg_report(labels, rec.annotations.payload)
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "point_labels", labels)
        elif config.task == "boundary":
            if config.method == "peak" and "min_distance" not in params:
                gaps = np.concatenate([
                    np.diff(r.annotations.payload)
                    for r in train_recs
                    if r.annotations.payload.size >= 2
                ])
                params["min_distance"] = distance_heuristic(gaps)
            pts = baseline_boundary(rec.series, config.method, params, train_recs)
            rep = _boundary_report(pts, rec.annotations.payload, T, config.boundary_tolerance)
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "boundary_points", pts)
        else:
            train_values = np.vstack([r.series.values for r in train_recs])
            scores, mask = baseline_anomaly(rec.series.values, config.method, params, train_values)
            gt_mask = np.zeros(T, dtype=bool)
            gt_mask[rec.annotations.payload] = True
            rep = _anomaly_report(scores, mask, gt_mask)
            if run_dir is not None:
                _write_sidecar(run_dir, rec.record_id, "anomaly_points", np.flatnonzero(mask))
        reports[rec.record_id] = rep
    return reports


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def _plot_record(run_dir, config, record, report, raw, L, max_plots=4):
    plot_dir = run_dir / "plots"
    plot_dir.mkdir(exist_ok=True)
    if len(list(plot_dir.glob("*.png"))) >= max_plots:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(10, 3))
    x = record.series.values[:L, 0]
    ax.plot(x, lw=0.7, color="k", label=record.series.feature_names[0])
    if config.task == "semseg":
        pred = semseg_decide(raw)
        for seg in assemble_segments(pred):
            if seg.label != 0:
                ax.axvspan(seg.start, seg.end, color=f"C{seg.label}", alpha=0.25)
    elif config.task == "boundary":
        for p in find_boundaries(_sigmoid(raw[:, 0]), max(1, int(report.values.get("min_distance", 1)))):
            ax.axvline(p, color="C3", lw=0.8)
        for g in record.annotations.payload:
            if g < L:
                ax.plot(g, x[g], "C2^", ms=4)
    else:
        gt_mask = np.zeros(L, dtype=bool)
        pts = record.annotations.payload
        gt_mask[pts[pts < L]] = True
        for a, b in zip(*_mask_runs(gt_mask)):
            ax.axvspan(a, b, color="C1", alpha=0.3)
    ax.set_title(f"{record.record_id} ({config.task})")
    ax.set_xlim(0, L)
    fig.tight_layout()
    fig.savefig(plot_dir / f"{record.record_id}.png", dpi=100)
    plt.close(fig)


def _mask_runs(mask):
    m = np.asarray(mask, dtype=bool)
    starts = np.flatnonzero(m & ~np.concatenate(([False], m[:-1])))
    ends = np.flatnonzero(m & ~np.concatenate((m[1:], [False]))) + 1
    return starts, ends


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _sweep_arms(config: ExperimentConfig, axis: str, backbones: Optional[Sequence[str]] = None):
    if axis == "covariate_strategy":
        return [(arm, {"covariate_strategy": arm}) for arm in COVARIATE_ARMS]
    if axis == "prompt_flags":
        return [(name, {"prompt_components": comps}) for name, comps in PROMPT_ARMS]
    if axis == "backbone":
        names = list(backbones) if backbones else [config.backbone]
        return [(name, {"backbone": name}) for name in names]
    raise ValueError(f"unknown sweep axis {axis!r}")


def _write_table(path_base: Path, rows: list[dict]) -> None:
    keys = ["arm"] + sorted({k for r in rows for k in r if k != "arm"})
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(k)) for k in keys))
    path_base.with_suffix(".tsv").write_text("\n".join(lines) + "\n")
    path_base.with_suffix(".json").write_text(json.dumps(rows, indent=2, default=str) + "\n")


def _fmt(v):
    if v is None:
        return "absent"
    if isinstance(v, float):
        return format(v, ".4f")
    return str(v)


def sweep(
    config: ExperimentConfig,
    axis: str,
    backbones: Optional[Sequence[str]] = None,
) -> list[dict]:
    """One training run per arm with a shared seed; emits a comparison table.

    An arm failure still writes the partial table before re-raising.
    """
    arms = _sweep_arms(config, axis, backbones)
    sweep_dir = Path(config.out_root) / f"{config.run_name}-sweep-{axis}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    try:
        for arm_name, overrides in arms:
            arm_cfg = config.replace(
                run_name=f"{config.run_name}-sweep-{axis}/{arm_name}", **overrides
            )
            artifacts = train(arm_cfg)
            agg = artifacts.reports["aggregate"]
            row = {"arm": arm_name, **agg.values}
            first = next(r for k, r in artifacts.reports.items() if k != "aggregate")
            row["n_text"] = first.diagnostics.get("n_text")
            row["n_patch_positions"] = first.diagnostics.get("n_patch_positions")
            rows.append(row)
    finally:
        _write_table(sweep_dir / "table", rows)
    return rows
