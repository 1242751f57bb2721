"""Window encoder: normalization, patching, reprogramming, covariate fusion.

A raw window (B, T, C) becomes a backbone-ready embedding sequence in
four steps: per-window instance normalization (reversible, so anomaly
reconstructions can be mapped back to signal units), slicing into
overlapping patches, a shared linear patch embedding, and cross
attention against a small bank of prototypes derived from the backbone's
token-embedding table. Covariates are merged by one of five strategies;
`concatenate` merges before the reprogrammer, the others after.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .series import PatchGrid, patch_indices

__all__ = [
    "STRATEGIES",
    "RevinState",
    "RevIN",
    "revin_normalize",
    "revin_denormalize",
    "PatchEmbed",
    "PrototypeBank",
    "PatchReprogrammer",
    "CovariateWeights",
    "EmbeddingSequence",
    "fuse_covariates",
    "TimeSeriesEncoder",
]

STRATEGIES = (
    "concatenate",
    "average_weighted",
    "average_unweighted",
    "interleave",
    "independent",
)


# ---------------------------------------------------------------------------
# Reversible instance normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RevinState:
    """Per-channel window statistics; enough to invert the normalization."""

    mean: np.ndarray
    std: np.ndarray  # sqrt(population variance + eps)
    eps: float


class RevIN(nn.Module):
    """Instance normalization over the time axis with retained statistics.

    Population (biased) standard deviation, epsilon-guarded so constant
    channels normalize to zero. Optional learned per-channel affine.
    """

    def __init__(self, n_channels: int, eps: float = 1e-5, affine: bool = False):
        super().__init__()
        self.n_channels = n_channels
        self.eps = eps
        self.affine = affine
        if affine:
            self.affine_weight = nn.Parameter(torch.ones(n_channels))
            self.affine_bias = nn.Parameter(torch.zeros(n_channels))
        self.mean: Optional[torch.Tensor] = None
        self.std: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, mode: str) -> torch.Tensor:
        if mode == "norm":
            if not torch.isfinite(x).all():
                raise ValueError("non-finite input to RevIN")
            self.mean = x.mean(dim=-2, keepdim=True).detach()
            var = x.var(dim=-2, keepdim=True, unbiased=False)
            self.std = torch.sqrt(var + self.eps).detach()
            x = (x - self.mean) / self.std
            if self.affine:
                x = x * self.affine_weight + self.affine_bias
            return x
        if mode == "denorm":
            if self.mean is None or self.std is None:
                raise RuntimeError("denorm before norm")
            if self.affine:
                x = (x - self.affine_bias) / (self.affine_weight + self.eps**2)
            return x * self.std + self.mean
        raise ValueError(f"unknown RevIN mode {mode!r}")


def revin_normalize(window: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, RevinState]:
    """Normalize a single (T, C) window; returns the state for inversion."""
    x = np.asarray(window, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    mean = x.mean(axis=0)
    std = np.sqrt(x.var(axis=0) + eps)
    return (x - mean) / std, RevinState(mean=mean, std=std, eps=eps)


def revin_denormalize(window: np.ndarray, state: RevinState) -> np.ndarray:
    """Exact inverse of revin_normalize under the same state."""
    x = np.asarray(window, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x * state.std + state.mean


# ---------------------------------------------------------------------------
# Patching and embedding
# ---------------------------------------------------------------------------

class PatchEmbed(nn.Module):
    """Linear projection of raw patches, shared across covariates and patches."""

    def __init__(self, patch_len: int, d_patch: int):
        super().__init__()
        self.patch_len = patch_len
        self.proj = nn.Linear(patch_len, d_patch)

    def forward(self, x: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        """(B, T, C) -> per-covariate patch embeddings (B, C, N_p, d_patch)."""
        if grid.patch_len != self.patch_len:
            raise ValueError("grid patch length does not match the embedding layer")
        patches = x.transpose(-1, -2).unfold(-1, grid.patch_len, grid.stride)
        if patches.shape[-2] != grid.n_patches:
            raise ValueError("window length inconsistent with the patch grid")
        return self.proj(patches)


class PrototypeBank(nn.Module):
    """Prototype vectors: a learned linear reduction of the token table.

    The backbone's (vocab, d_llm) embedding table is frozen here (a
    buffer); only the (n_proto, vocab) reduction weights train.
    """

    def __init__(self, embedding_table: torch.Tensor, n_proto: int = 32):
        super().__init__()
        if n_proto < 1:
            raise ValueError("n_proto must be >= 1")
        table = embedding_table.detach().clone()
        self.register_buffer("table", table)
        self.n_proto = n_proto
        self.reduce = nn.Linear(table.shape[0], n_proto, bias=False)

    def forward(self) -> torch.Tensor:
        return self.reduce(self.table.t()).t()  # (n_proto, d_llm)


class PatchReprogrammer(nn.Module):
    """Cross attention from patch embeddings onto prototype vectors.

    Per head, each output is a convex combination of the value-projected
    prototypes; heads are concatenated and passed through the output
    projection to the backbone dimension.
    """

    def __init__(
        self,
        d_in: int,
        d_llm: int,
        n_heads: int = 4,
        d_keys: Optional[int] = None,
    ):
        super().__init__()
        d_keys = d_keys or max(1, d_in // n_heads)
        self.n_heads = n_heads
        self.d_keys = d_keys
        self.query_projection = nn.Linear(d_in, d_keys * n_heads)
        self.key_projection = nn.Linear(d_llm, d_keys * n_heads)
        self.value_projection = nn.Linear(d_llm, d_keys * n_heads)
        self.out_projection = nn.Linear(d_keys * n_heads, d_llm)

    def forward(
        self,
        patches: torch.Tensor,
        prototypes: torch.Tensor,
        return_details: bool = False,
    ):
        """(B, L, d_in) x (S, d_llm) -> (B, L, d_llm)."""
        if prototypes.shape[0] < 1:
            raise ValueError("empty prototype bank")
        B, L, _ = patches.shape
        S = prototypes.shape[0]
        H = self.n_heads
        q = self.query_projection(patches).view(B, L, H, -1)
        k = self.key_projection(prototypes).view(S, H, -1)
        v = self.value_projection(prototypes).view(S, H, -1)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = torch.einsum("blhe,she->bhls", q, k)
        attn = torch.softmax(scale * scores, dim=-1)
        pre = torch.einsum("bhls,she->blhe", attn, v)
        out = self.out_projection(pre.reshape(B, L, -1))
        if return_details:
            return out, attn, v, pre
        return out


class CovariateWeights(nn.Module):
    """Covariate mixing weights kept on the simplex by construction.

    Free logits pass through a softmax, so the non-negativity and
    sum-to-one constraints survive any optimizer step.
    """

    def __init__(self, n_channels: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_channels))

    def forward(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)


# ---------------------------------------------------------------------------
# Covariate fusion
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSequence:
    """Backbone-ready embeddings with a provenance tag per position.

    embeddings is (B, L, d) for the fused strategies and (B, C, N_p, d)
    with independent=True, where downstream code runs one forward pass
    per covariate and averages the raw outputs.
    """

    embeddings: torch.Tensor
    provenance: tuple[tuple[str, int, int], ...]  # (kind, patch_idx, cov_idx)
    independent: bool = False

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]


def fuse_covariates(
    aligned: torch.Tensor,
    strategy: str,
    weights: Optional[torch.Tensor] = None,
) -> EmbeddingSequence:
    """Merge per-covariate aligned embeddings (B, C, N_p, d) after reprogramming.

    average_* mixes with simplex weights (uniform when unweighted);
    interleave emits the patch-major sequence (p1c1, p1c2, ..., p2c1, ...);
    independent returns the per-covariate stack untouched. The
    concatenate strategy merges before the reprogrammer and is handled by
    the encoder, not here.
    """
    if aligned.ndim != 4:
        raise ValueError("aligned embeddings must be (B, C, N_p, d)")
    B, C, N_p, d = aligned.shape
    if strategy == "concatenate":
        raise ValueError("concatenate fuses before reprogramming; see TimeSeriesEncoder")
    if strategy in ("average_weighted", "average_unweighted"):
        if strategy == "average_unweighted" or weights is None:
            w = torch.full((C,), 1.0 / C, dtype=aligned.dtype, device=aligned.device)
        else:
            w = weights.to(aligned.dtype)
        if w.shape != (C,):
            raise ValueError("weights must have one entry per covariate")
        fused = (aligned * w.view(1, C, 1, 1)).sum(dim=1)
        prov = tuple(("patch", i, -1) for i in range(N_p))
        return EmbeddingSequence(fused, prov)
    if strategy == "interleave":
        fused = aligned.permute(0, 2, 1, 3).reshape(B, N_p * C, d)
        prov = tuple(("patch", i, c) for i in range(N_p) for c in range(C))
        return EmbeddingSequence(fused, prov)
    if strategy == "independent":
        prov = tuple(("patch", i, -1) for i in range(N_p))
        return EmbeddingSequence(aligned, prov, independent=True)
    raise ValueError(f"unknown covariate strategy {strategy!r}")


class TimeSeriesEncoder(nn.Module):
    """RevIN -> patch -> embed -> reprogram -> fuse, as one trainable module."""

    def __init__(
        self,
        n_channels: int,
        window_len: int,
        patch_len: int,
        stride: int,
        d_patch: int,
        d_llm: int,
        embedding_table: torch.Tensor,
        strategy: str = "concatenate",
        n_proto: int = 32,
        n_heads: int = 4,
        revin_affine: bool = False,
    ):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown covariate strategy {strategy!r}")
        self.strategy = strategy
        self.n_channels = n_channels
        self.grid = patch_indices(window_len, patch_len, stride)
        self.revin = RevIN(n_channels, affine=revin_affine)
        self.patch_embed = PatchEmbed(patch_len, d_patch)
        d_in = d_patch * n_channels if strategy == "concatenate" else d_patch
        self.bank = PrototypeBank(embedding_table, n_proto)
        self.reprogrammer = PatchReprogrammer(d_in, d_llm, n_heads=n_heads)
        self.cov_weights = CovariateWeights(n_channels) if strategy == "average_weighted" else None

    @property
    def n_patches(self) -> int:
        return self.grid.n_patches

    def sequence_length(self) -> int:
        """Patch positions fed to the backbone per forward pass."""
        if self.strategy == "interleave":
            return self.grid.n_patches * self.n_channels
        return self.grid.n_patches

    def forward(self, x: torch.Tensor) -> EmbeddingSequence:
        """(B, T, C) raw window -> backbone-ready EmbeddingSequence."""
        if x.shape[-1] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {x.shape[-1]}")
        normalized = self.revin(x, "norm")
        emb = self.patch_embed(normalized, self.grid)  # (B, C, N_p, d_patch)
        prototypes = self.bank()
        B, C, N_p, d_p = emb.shape
        if self.strategy == "concatenate":
            merged = emb.permute(0, 2, 1, 3).reshape(B, N_p, C * d_p)
            fused = self.reprogrammer(merged, prototypes)
            prov = tuple(("patch", i, -1) for i in range(N_p))
            return EmbeddingSequence(fused, prov)
        aligned = self.reprogrammer(emb.reshape(B * C, N_p, d_p), prototypes)
        aligned = aligned.view(B, C, N_p, -1)
        weights = self.cov_weights() if self.cov_weights is not None else None
        return fuse_covariates(aligned, self.strategy, weights)
