"""Traditional comparison methods, one family per task.

Semantic segmentation: a flow threshold rule, a point-wise k-NN
classifier over local features, and a Gaussian-emission HMM decoded
with Viterbi. Boundary detection: constrained peak picking on a raw
channel, and DTW template matching. Anomaly detection: quantile,
z-score, rolling-average, and FFT-reconstruction detectors. All methods
are deterministic given (data, params, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .ingest import Record
from .series import MultivariateSeries, assemble_segments
from .tasks import anomaly_threshold, apply_threshold, find_boundaries, nearest_rank_quantile

__all__ = [
    "BaselineSpec",
    "SEMSEG_METHODS",
    "BOUNDARY_METHODS",
    "ANOMALY_METHODS",
    "baseline_semseg",
    "baseline_boundary",
    "baseline_anomaly",
    "GaussianHMM",
    "dtw_distance",
]

SEMSEG_METHODS = ("threshold", "knn", "hmm")
BOUNDARY_METHODS = ("peak", "template")
ANOMALY_METHODS = ("quantile", "zscore", "rolling", "fft")


@dataclass(frozen=True)
class BaselineSpec:
    """Method selection plus its parameter map."""

    task: str
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        methods = {
            "semseg": SEMSEG_METHODS,
            "boundary": BOUNDARY_METHODS,
            "anomaly": ANOMALY_METHODS,
        }.get(self.task)
        if methods is None:
            raise ValueError(f"unknown baseline task {self.task!r}")
        if self.method not in methods:
            raise ValueError(f"unknown {self.task} baseline {self.method!r}")


# ---------------------------------------------------------------------------
# Semantic segmentation baselines
# ---------------------------------------------------------------------------

def _channel_index(series: MultivariateSeries, name: str) -> int:
    if name not in series.feature_names:
        raise ValueError(f"series has no {name!r} channel: {series.feature_names}")
    return series.feature_names.index(name)


def _point_features(values: np.ndarray, half: int = 4) -> np.ndarray:
    """Per point and channel: value, centered 9-point mean and sd."""
    T, C = values.shape
    feats = []
    for c in range(C):
        x = values[:, c]
        padded = np.pad(x, half, mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1)
        feats += [x, windows.mean(axis=1), windows.std(axis=1)]
    return np.column_stack(feats)


class GaussianHMM:
    """Diagonal Gaussian HMM trained by EM, decoded with Viterbi."""

    def __init__(self, n_states: int, n_iter: int = 30, tol: float = 1e-4, seed: int = 0):
        self.n_states = n_states
        self.n_iter = n_iter
        self.tol = tol
        self.seed = seed
        self.log_pi: Optional[np.ndarray] = None
        self.log_A: Optional[np.ndarray] = None
        self.means: Optional[np.ndarray] = None
        self.vars: Optional[np.ndarray] = None

    def _log_emissions(self, X, means, vars_):
        diff = X[:, None, :] - means[None, :, :]
        return -0.5 * np.sum(diff**2 / vars_ + np.log(2 * np.pi * vars_), axis=2)

    def _em_once(self, X, rng):
        T, D = X.shape
        S = self.n_states
        means = X[rng.choice(T, size=S, replace=False)].astype(float)
        vars_ = np.tile(np.maximum(X.var(axis=0), 1e-6), (S, 1))
        log_pi = np.full(S, -math.log(S))
        A = np.full((S, S), 0.1 / max(S - 1, 1))
        np.fill_diagonal(A, 0.9)
        log_A = np.log(A)
        prev_ll = -np.inf
        for _ in range(self.n_iter):
            logB = self._log_emissions(X, means, vars_)
            la = np.zeros((T, S))
            la[0] = log_pi + logB[0]
            for t in range(1, T):
                la[t] = logB[t] + logsumexp(la[t - 1][:, None] + log_A, axis=0)
            lb = np.zeros((T, S))
            for t in range(T - 2, -1, -1):
                lb[t] = logsumexp(log_A + (logB[t + 1] + lb[t + 1])[None, :], axis=1)
            ll = logsumexp(la[-1])
            gamma = np.exp(la + lb - ll)
            lx = (
                la[:-1, :, None]
                + log_A[None, :, :]
                + (logB[1:] + lb[1:])[:, None, :]
                - ll
            )
            xi_sum = np.exp(lx).sum(axis=0)
            log_pi = np.log(np.maximum(gamma[0], 1e-300))
            denom = np.maximum(xi_sum.sum(axis=1, keepdims=True), 1e-300)
            log_A = np.log(np.maximum(xi_sum / denom, 1e-300))
            w = gamma.sum(axis=0)[:, None]
            means = (gamma.T @ X) / np.maximum(w, 1e-300)
            sq = np.stack([(gamma[:, s][:, None] * (X - means[s]) ** 2).sum(axis=0) for s in range(S)])
            vars_ = np.maximum(sq / np.maximum(w, 1e-300), 1e-6)
            if ll - prev_ll < self.tol and np.isfinite(prev_ll):
                break
            prev_ll = ll
        return ll, (log_pi, log_A, means, vars_)

    def fit(self, X: np.ndarray, n_restarts: int = 10) -> "GaussianHMM":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        best = (-np.inf, None)
        for r in range(n_restarts):
            rng = np.random.default_rng(self.seed + r)
            ll, params = self._em_once(X, rng)
            if ll > best[0]:
                best = (ll, params)
        self.log_pi, self.log_A, self.means, self.vars = best[1]
        return self

    def viterbi(self, X: np.ndarray) -> np.ndarray:
        if self.means is None:
            raise RuntimeError("fit before decoding")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        logB = self._log_emissions(X, self.means, self.vars)
        T, S = logB.shape
        delta = np.zeros((T, S))
        back = np.zeros((T - 1, S), dtype=int) if T > 1 else np.zeros((0, S), dtype=int)
        delta[0] = self.log_pi + logB[0]
        for t in range(1, T):
            cand = delta[t - 1][:, None] + self.log_A
            back[t - 1] = np.argmax(cand, axis=0)
            delta[t] = logB[t] + np.max(cand, axis=0)
        states = np.empty(T, dtype=int)
        states[-1] = int(np.argmax(delta[-1]))
        for t in range(T - 2, -1, -1):
            states[t] = back[t][states[t + 1]]
        return states


def baseline_semseg(
    test_series: MultivariateSeries,
    method: str,
    params: Optional[dict] = None,
    train_records: Sequence[Record] = (),
) -> np.ndarray:
    """Point-wise class labels for the test series.

    threshold labels expiration wherever the flow channel is below the
    cutoff; knn and hmm fit on the training records' values (and labels,
    for the state-to-class vote) first.
    """
    params = dict(params or {})
    BaselineSpec("semseg", method, params)
    if method == "threshold":
        flow = test_series.values[:, _channel_index(test_series, params.get("flow_channel", "flow"))]
        cutoff = params.get("cutoff", 0.05)
        exp_class = params.get("expiration_class", 1)
        insp_class = params.get("inspiration_class", 0)
        return np.where(flow < cutoff, exp_class, insp_class)

    if not train_records:
        raise ValueError(f"{method} baseline needs training records")
    train_X = np.vstack([r.series.values for r in train_records])
    train_y = np.concatenate([r.annotations.payload for r in train_records])
    seed = int(params.get("seed", 0))
    max_points = int(params.get("max_train_points", 20000))
    if train_X.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(train_X.shape[0], max_points, replace=False)
        keep.sort()
        train_X, train_y = train_X[keep], train_y[keep]

    if method == "knn":
        from sklearn.neighbors import KNeighborsClassifier

        k = int(params.get("k", 5))
        if k > train_X.shape[0]:
            raise ValueError(f"k={k} exceeds {train_X.shape[0]} training points")
        ftr = _point_features(train_X)
        fte = _point_features(test_series.values)
        mu, sd = ftr.mean(axis=0), np.maximum(ftr.std(axis=0), 1e-9)
        clf = KNeighborsClassifier(n_neighbors=k)
        clf.fit((ftr - mu) / sd, train_y)
        return clf.predict((fte - mu) / sd)

    # hmm
    n_states = int(params.get("n_states", len(np.unique(train_y))))
    hmm = GaussianHMM(n_states, seed=seed).fit(train_X, n_restarts=int(params.get("n_restarts", 10)))
    train_states = hmm.viterbi(train_X)
    mapping = {}
    fallback = int(np.bincount(train_y).argmax())
    for s in range(n_states):
        members = train_y[train_states == s]
        mapping[s] = int(np.bincount(members).argmax()) if members.size else fallback
    states = hmm.viterbi(test_series.values)
    return np.asarray([mapping[s] for s in states], dtype=int)


# ---------------------------------------------------------------------------
# Boundary detection baselines
# ---------------------------------------------------------------------------

def dtw_distance(a: np.ndarray, b: np.ndarray, band: int) -> float:
    """Banded (Sakoe-Chiba) dynamic time warping distance, squared costs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = a.size, b.size
    inf = float("inf")
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur = [inf] * (m + 1)
        lo = max(1, i - band)
        hi = min(m, i + band)
        ai = a[i - 1]
        for j in range(lo, hi + 1):
            cost = (ai - b[j - 1]) ** 2
            cur[j] = cost + min(prev[j], prev[j - 1], cur[j - 1])
        prev = cur
    return prev[m]


def _training_segments(train_records: Sequence[Record], channel: int) -> list[np.ndarray]:
    segments = []
    for rec in train_records:
        pts = rec.annotations.payload
        x = rec.series.values[:, channel]
        edges = list(pts) + [rec.series.n_points]
        for a, b in zip(edges[:-1], edges[1:]):
            if b - a >= 4:
                segments.append(x[a:b])
    return segments


def baseline_boundary(
    test_series: MultivariateSeries,
    method: str,
    params: Optional[dict] = None,
    train_records: Sequence[Record] = (),
) -> np.ndarray:
    """Boundary indices for the test series.

    peak runs the constrained peak picker on a raw channel; template
    slides DTW matches of training segments and emits the start points
    of the non-overlapping best matches.
    """
    params = dict(params or {})
    BaselineSpec("boundary", method, params)
    channel_name = params.get("channel", test_series.feature_names[0])
    channel = _channel_index(test_series, channel_name)
    x = test_series.values[:, channel]

    if method == "peak":
        min_distance = int(params.get("min_distance", 1))
        return find_boundaries(x, min_distance)

    segments = _training_segments(train_records, channel)
    if not segments:
        raise ValueError("no templates extractable from the training records")
    seed = int(params.get("seed", 0))
    n_templates = min(int(params.get("n_templates", 20)), len(segments))
    order = np.random.default_rng(seed).permutation(len(segments))[:n_templates]
    templates = [segments[i] for i in order]
    win = int(np.median([len(t) for t in templates]))
    band_fraction = float(params.get("band_fraction", 0.1))
    hop = int(params.get("hop", 1))
    T = x.size
    if win > T:
        raise ValueError("templates longer than the test series")
    candidates = []
    for start in range(0, T - win + 1, hop):
        window = x[start : start + win]
        d = min(
            dtw_distance(window, t, max(1, int(band_fraction * len(t)))) for t in templates
        )
        candidates.append((d, start))
    candidates.sort()
    taken: list[int] = []
    for d, start in candidates:
        if all(abs(start - s) >= win for s in taken):
            taken.append(start)
    return np.asarray(sorted(taken), dtype=int)


# ---------------------------------------------------------------------------
# Anomaly detection baselines
# ---------------------------------------------------------------------------

def _rolling_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Centered rolling mean with shrinking edge windows."""
    half = w // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    n = x.size
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def baseline_anomaly(
    test_values: np.ndarray,
    method: str,
    params: Optional[dict] = None,
    train_values: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(scores, mask) for the test values; per-channel flags OR-combine.

    quantile and zscore calibrate on train_values (defaulting to the test
    values themselves when no training data is supplied); rolling and fft
    need no fit.
    """
    params = dict(params or {})
    BaselineSpec("anomaly", method, params)
    X = np.asarray(test_values, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    train = X if train_values is None else np.asarray(train_values, dtype=float)
    if train.ndim == 1:
        train = train.reshape(-1, 1)
    T, C = X.shape

    if method == "quantile":
        q_lo = float(params.get("q_lo", 0.05))
        q_hi = float(params.get("q_hi", 0.95))
        scores = np.zeros((T, C))
        flags = np.zeros((T, C), dtype=bool)
        for c in range(C):
            lo = nearest_rank_quantile(train[:, c], q_lo) if q_lo > 0 else -np.inf
            hi = nearest_rank_quantile(train[:, c], q_hi)
            excess = np.maximum(np.maximum(lo - X[:, c], X[:, c] - hi), 0.0)
            scores[:, c] = excess
            flags[:, c] = (X[:, c] < lo) | (X[:, c] > hi)
        return scores.max(axis=1), flags.any(axis=1)

    if method == "zscore":
        k = float(params.get("k", 3.0))
        mu = train.mean(axis=0)
        sd = np.maximum(train.std(axis=0), 1e-12)
        z = np.abs(X - mu) / sd
        return z.max(axis=1), (z > k).any(axis=1)

    if method == "rolling":
        w = int(params.get("window", 25))
        threshold = float(params.get("threshold", 1.0))
        if w >= T:
            raise ValueError(f"rolling window {w} must be below series length {T}")
        dev = np.column_stack([np.abs(X[:, c] - _rolling_mean(X[:, c], w)) for c in range(C)])
        return dev.max(axis=1), (dev > threshold).any(axis=1)

    # fft
    m = int(params.get("n_components", 4))
    ratio = float(params.get("anomaly_ratio", 0.05))
    if m >= T / 2:
        raise ValueError(f"n_components {m} must be below T/2 = {T / 2:g}")
    scores = np.zeros((T, C))
    flags = np.zeros((T, C), dtype=bool)
    for c in range(C):
        spec = np.fft.rfft(X[:, c])
        keep = np.argsort(np.abs(spec))[-m:]
        pruned = np.zeros_like(spec)
        pruned[keep] = spec[keep]
        recon = np.fft.irfft(pruned, n=T)
        err = (X[:, c] - recon) ** 2
        scores[:, c] = err
        flags[:, c] = apply_threshold(err, anomaly_threshold(err, ratio))
    return scores.max(axis=1), flags.any(axis=1)
