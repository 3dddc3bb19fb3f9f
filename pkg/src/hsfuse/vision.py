"""Feature encoder over the decoded fusion map, plus classifier and projection heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

HEAD_POOLING = ("avg", "flatten")


class MultimodalFeatureEncoder(nn.Module):
    """3D residual encoder treating the channel axis of the fused map as depth.

    The (B, K, m, n) decoder output is read as a one-channel volume
    (B, 1, K, m, n). Output is relu(conv_b(conv_a(x)) + conv_skip(x)), then
    either averaged over the two spatial axes (``avg``) or kept whole
    (``flatten``) before flattening to (B, feature_dim).
    """

    def __init__(self, channels: int = 16, pooling: str = "avg"):
        super().__init__()
        if pooling not in HEAD_POOLING:
            raise ConfigError("head_pooling", f"must be one of {HEAD_POOLING}, got {pooling!r}")
        self.pooling = pooling
        self.channels = channels
        self.conv_a = nn.Conv3d(1, channels, 3, 1, 1)
        self.conv_b = nn.Conv3d(channels, channels, 3, 1, 1)
        self.conv_skip = nn.Conv3d(1, channels, 3, 1, 1)

    def feature_dim(self, depth: int, m: int, n: int) -> int:
        if self.pooling == "avg":
            return self.channels * depth
        return self.channels * depth * m * n

    def forward(self, f_fus_de: torch.Tensor) -> torch.Tensor:
        if min(f_fus_de.shape[-2:]) < 3:
            raise ConfigError("patch", "spatial dims smaller than the 3x3x3 kernel")
        x = f_fus_de.unsqueeze(1)
        h = F.relu(self.conv_b(self.conv_a(x)) + self.conv_skip(x))
        if self.pooling == "avg":
            h = h.mean(dim=(-2, -1))
        return h.flatten(1)


@dataclass
class FusedEmbedding:
    f_fus: torch.Tensor
    f_fus_proj: torch.Tensor
    logits: torch.Tensor

    @property
    def y_hat(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


class VisionHead(nn.Module):
    def __init__(self, feature_dim: int, n_classes: int, shared_dim: int, mfe_channels: int = 16,
                 pooling: str = "avg"):
        super().__init__()
        self.mfe = MultimodalFeatureEncoder(mfe_channels, pooling)
        self.classifier = nn.Linear(feature_dim, n_classes)
        self.projection = nn.Linear(feature_dim, shared_dim)

    def forward(self, f_fus_de: torch.Tensor) -> FusedEmbedding:
        f = self.mfe(f_fus_de)
        return FusedEmbedding(f_fus=f, f_fus_proj=self.projection(f), logits=self.classifier(f))


def classify(f_fus: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Class posterior softmax(affine(f_fus))."""
    return torch.softmax(layer(f_fus), dim=-1)


def project(f_fus: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    return layer(f_fus)
