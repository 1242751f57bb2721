"""End-to-end pipeline: prompt embeddings + raw window -> raw predictions.

Only the encoder and the projection head train; the backbone is a
frozen feature extractor shared by every forward pass. Under the
independent covariate strategy the same head runs once per covariate
and the raw outputs are averaged.
"""
from __future__ import annotations

from typing import Iterator, Optional

import torch
import torch.nn as nn

from .backbone import ProjectionHead, extract_patch_outputs, fuse_text_and_patches
from .encoder import TimeSeriesEncoder

__all__ = ["FusionModel", "head_outputs_for"]


def head_outputs_for(task: str, n_classes: int, n_channels: int) -> int:
    """Per-point output width K per task (binary semseg collapses to 1)."""
    if task == "semseg":
        return 1 if n_classes == 2 else n_classes
    if task == "boundary":
        return 1
    if task == "anomaly":
        return n_channels
    raise ValueError(f"unknown task {task!r}")


class FusionModel(nn.Module):
    """Encoder + frozen backbone + projection head."""

    def __init__(self, backbone: nn.Module, encoder: TimeSeriesEncoder, head: ProjectionHead):
        super().__init__()
        self.backbone = backbone
        self.encoder = encoder
        self.head = head
        self.last_n_text: Optional[int] = None

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoder.parameters()
        yield from self.head.parameters()

    def forward(self, x: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """(B, T, C) window + (n_text, d) prompt embeddings -> (B, N_t, K)."""
        seq = self.encoder(x)
        if seq.independent:
            outs = []
            for c in range(seq.embeddings.shape[1]):
                fused = fuse_text_and_patches(text_emb, seq.embeddings[:, c])
                self.last_n_text = fused.n_text
                hidden = self.backbone(fused.embeddings)
                outs.append(self.head(extract_patch_outputs(hidden, fused.n_text)))
            return torch.stack(outs, dim=0).mean(dim=0)
        fused = fuse_text_and_patches(text_emb, seq.embeddings)
        self.last_n_text = fused.n_text
        hidden = self.backbone(fused.embeddings)
        return self.head(extract_patch_outputs(hidden, fused.n_text))

    def denormalize(self, raw: torch.Tensor) -> torch.Tensor:
        """Map reconstructions back to signal units with the last window stats."""
        return self.encoder.revin(raw, "denorm")
