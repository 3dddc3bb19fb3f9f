"""Causal text transformer and the weight-shared prompt refiner."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .bpe import CONTEXT_LENGTH


class Block(nn.Module):
    """Pre-norm transformer block (attention + 4x MLP), 12*w^2 + 13*w parameters."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        return x + self.mlp(self.ln_2(x))


def block_parameter_count(width: int) -> int:
    return 12 * width * width + 13 * width


class TextEncoder(nn.Module):
    """Token + learned position embedding, causal blocks, EOT pooling, LN, projection."""

    def __init__(self, vocab_size: int, width: int = 512, heads: int = 8, layers: int = 3,
                 out_dim: int = 512, context_length: int = CONTEXT_LENGTH):
        super().__init__()
        self.context_length = context_length
        self.token_embedding = nn.Embedding(vocab_size, width)
        self.positional_embedding = nn.Parameter(torch.empty(context_length, width))
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Linear(width, out_dim)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        mask = torch.full((context_length, context_length), float("-inf")).triu_(1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, ids: torch.Tensor, eot: torch.Tensor) -> torch.Tensor:
        """Embed (B, L) token ids; ``eot`` gives each row's EOT index. Returns (B, out_dim)."""
        L = ids.shape[1]
        x = self.token_embedding(ids) + self.positional_embedding[:L]
        mask = self.causal_mask[:L, :L].to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        pooled = x[torch.arange(ids.shape[0]), eot]
        return self.proj(self.ln_final(pooled))

    def load_weights(self, source, strict: bool = False) -> list[str]:
        """Copy externally trained weights into this tower.

        ``source`` is a mapping of parameter name to array, or a path to a
        ``.npz`` / torch ``.pt`` state dict using this module's names. Keys
        that are absent keep their current values unless ``strict``. Shape
        mismatches always raise. Returns the names that were loaded.
        """
        if isinstance(source, (str, Path)):
            path = Path(source)
            if path.suffix == ".npz":
                with np.load(path, allow_pickle=False) as data:
                    source = {k: data[k] for k in data.files}
            else:
                source = torch.load(path, map_location="cpu", weights_only=True)
        own = self.state_dict()
        unknown = sorted(set(source) - set(own))
        if unknown:
            raise KeyError(f"unknown text-encoder weights: {unknown[:5]}")
        if strict and set(own) - set(source):
            raise KeyError(f"missing text-encoder weights: {sorted(set(own) - set(source))[:5]}")
        loaded = []
        with torch.no_grad():
            for name, value in source.items():
                value = torch.as_tensor(np.asarray(value) if not torch.is_tensor(value) else value)
                if value.shape != own[name].shape:
                    raise ValueError(f"{name}: expected shape {tuple(own[name].shape)}, got {tuple(value.shape)}")
                own[name].copy_(value.to(own[name].dtype))
                loaded.append(name)
        return loaded


class PromptRefiner(nn.Module):
    """``e`` transformer blocks run over the class axis of a (C, s) prompt embedding.

    One instance is shared by all four prompt branches.
    """

    def __init__(self, width: int, heads: int, depth: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError(f"refiner depth must be >= 1, got {depth}")
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, s) or (K, C, s)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0) if squeeze else x
