"""Frozen sequence backbone adapters and the task projection head.

The backbone is any causal sequence-to-sequence transformer used purely
as a frozen feature extractor: prompts pass through its tokenizer and
embedding table, patch embeddings are appended after the text (so
patches can attend to context under causal masking), and outputs at the
patch positions feed the task head. A seeded, randomly initialized toy
backbone ships for CI; published pretrained decoders load through the
optional transformers adapter.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "FusedInput",
    "ToyBackbone",
    "PretrainedBackbone",
    "build_backbone",
    "fuse_text_and_patches",
    "extract_patch_outputs",
    "ProjectionHead",
]


@dataclass
class FusedInput:
    """[text embeddings] ++ [patch embeddings], with the split recorded."""

    embeddings: torch.Tensor  # (B, n_text + n_patch, d_model)
    n_text: int
    n_patch: int

    def __post_init__(self):
        if self.embeddings.ndim != 3:
            raise ValueError("fused embeddings must be (B, L, d)")
        if self.embeddings.shape[1] != self.n_text + self.n_patch:
            raise ValueError("fused length must equal n_text + n_patch")


def fuse_text_and_patches(text_emb: torch.Tensor, patch_emb: torch.Tensor) -> FusedInput:
    """Prefix every batch row with the (shared) text token embeddings."""
    if patch_emb.ndim != 3:
        raise ValueError("patch embeddings must be (B, L, d)")
    n_text = text_emb.shape[0]
    if n_text == 0:
        return FusedInput(patch_emb, 0, patch_emb.shape[1])
    if text_emb.shape[-1] != patch_emb.shape[-1]:
        raise ValueError("text and patch embedding dimensions differ")
    B = patch_emb.shape[0]
    text = text_emb.unsqueeze(0).expand(B, -1, -1)
    return FusedInput(torch.cat([text, patch_emb], dim=1), n_text, patch_emb.shape[1])


def extract_patch_outputs(outputs: torch.Tensor, n_text: int) -> torch.Tensor:
    """Drop the text positions; outputs there are ignored by design."""
    if outputs.ndim != 3:
        raise ValueError("outputs must be (B, L, d)")
    if not 0 <= n_text <= outputs.shape[1]:
        raise ValueError(f"n_text={n_text} inconsistent with length {outputs.shape[1]}")
    return outputs[:, n_text:, :]


class _Block(nn.Module):
    """Pre-LN causal transformer block."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        hd = d // self.n_heads
        q = q.view(B, L, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, L, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, L, self.n_heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        mask = torch.triu(torch.ones(L, L, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(1, 2).reshape(B, L, d)
        x = x + self.attn_out(att)
        return x + self.mlp(self.ln2(x))


class ToyBackbone(nn.Module):
    """Seeded random causal transformer over a byte vocabulary; frozen.

    Small enough for end-to-end finite-difference checks yet structurally
    identical to a pretrained decoder: embedding table, learned
    positions, causal blocks, final layer norm.
    """

    def __init__(
        self,
        seed: int = 0,
        d_model: int = 16,
        n_layers: int = 2,
        n_heads: int = 2,
        vocab_size: int = 256,
        max_context: int = 2048,
    ):
        super().__init__()
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.max_context = max_context
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_context, d_model)
        self.blocks = nn.ModuleList(_Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self._seeded_init(seed)
        self.requires_grad_(False)
        self.eval()

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if "ln" in name or "LayerNorm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.2)

    def tokenize(self, text: str) -> torch.Tensor:
        return torch.tensor(list(text.encode("utf-8")), dtype=torch.long)

    def embedding_table(self) -> torch.Tensor:
        return self.tok_emb.weight

    def embed_text(self, text: str, reserve: int = 0) -> tuple[torch.Tensor, int]:
        """Token embeddings for a prompt; rows of the frozen table.

        reserve is the patch budget: the prompt must leave that many
        positions free within the context window.
        """
        ids = self.tokenize(text)
        if len(ids) > self.max_context - reserve:
            raise ValueError(
                f"prompt of {len(ids)} tokens exceeds context "
                f"{self.max_context} minus patch budget {reserve}"
            )
        if len(ids) == 0:
            return torch.zeros(0, self.d_model), 0
        return self.tok_emb(ids), len(ids)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(B, L, d_model) -> (B, L, d_model); parameters never change."""
        B, L, d = embeddings.shape
        if L > self.max_context:
            raise ValueError(f"sequence of {L} positions exceeds context {self.max_context}")
        if d != self.d_model:
            raise ValueError(f"embedding dim {d} != d_model {self.d_model}")
        pos = self.pos_emb(torch.arange(L, device=embeddings.device))
        x = embeddings + pos
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class PretrainedBackbone(nn.Module):
    """Adapter over a published decoder checkpoint (transformers).

    Network/weights are optional extras; CI runs on the toy backbone
    only. The smallest published decoders (~100M parameters) remain a
    sanctioned regime for this architecture.
    """

    def __init__(self, name: str):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ImportError(
                "pretrained backbones need the optional 'transformers' extra"
            ) from e
        self.model = AutoModel.from_pretrained(name)
        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model.requires_grad_(False)
        self.model.eval()
        self.d_model = int(self.model.get_input_embeddings().weight.shape[1])
        self.max_context = int(getattr(self.model.config, "n_positions", 0) or
                               getattr(self.model.config, "max_position_embeddings"))

    def tokenize(self, text: str) -> torch.Tensor:
        return torch.tensor(self.tokenizer.encode(text), dtype=torch.long)

    def embedding_table(self) -> torch.Tensor:
        return self.model.get_input_embeddings().weight

    def embed_text(self, text: str, reserve: int = 0) -> tuple[torch.Tensor, int]:
        ids = self.tokenize(text)
        if len(ids) > self.max_context - reserve:
            raise ValueError(
                f"prompt of {len(ids)} tokens exceeds context "
                f"{self.max_context} minus patch budget {reserve}"
            )
        if len(ids) == 0:
            return torch.zeros(0, self.d_model), 0
        return self.model.get_input_embeddings()(ids), len(ids)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[1] > self.max_context:
            raise ValueError("sequence exceeds backbone context")
        return self.model(inputs_embeds=embeddings).last_hidden_state

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_backbone(name: str, seed: int = 0, **toy_options):
    """`toy` builds the seeded CI backbone; any other name is a checkpoint path."""
    if name == "toy":
        return ToyBackbone(seed=seed, **toy_options)
    return PretrainedBackbone(name)


class ProjectionHead(nn.Module):
    """One affine map from the flattened patch outputs to N_t x K values.

    The whole (n_positions * d_model) concatenated vector maps directly
    to the output points, so memory grows with both window length and
    sequence length; fine at desk scale, see README for the tradeoff.
    """

    def __init__(self, n_positions: int, d_model: int, n_points: int, n_outputs: int):
        super().__init__()
        self.n_positions = n_positions
        self.n_points = n_points
        self.n_outputs = n_outputs
        self.linear = nn.Linear(n_positions * d_model, n_points * n_outputs)

    def forward(self, patch_outputs: torch.Tensor) -> torch.Tensor:
        """(B, n_positions, d_model) -> (B, n_points, n_outputs)."""
        B, L, d = patch_outputs.shape
        if L * d != self.linear.in_features:
            raise ValueError(
                f"patch outputs {L}x{d} incompatible with head "
                f"expecting {self.n_positions} positions"
            )
        flat = patch_outputs.reshape(B, L * d)
        return self.linear(flat).view(B, self.n_points, self.n_outputs)
