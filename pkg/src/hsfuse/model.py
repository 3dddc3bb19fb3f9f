"""Full model: diffusion U-Net, vision heads, prompt towers, and one-step losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .diffusion import DecoderOutputs, DiffusionSchedule, FusionUNet, forward_diffuse, make_schedule
from .losses import LossBreakdown, loss_classification, loss_consistency, loss_noise, loss_total, similarity
from .text.bpe import BPEVocab, tokenize_batch
from .text.encoder import PromptRefiner, TextEncoder
from .text.manifest import PromptManifest
from .vision import FusedEmbedding, VisionHead


class FusionModel(nn.Module):
    def __init__(self, cfg: RunConfig, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.unet = FusionUNet(
            cfg.d, cfg.enc_filters, cfg.dec_filters, cfg.dec_out_channels, cfg.temb_dim,
            cfg.fusion_strategy,
        )
        depth = 2 * cfg.dec_out_channels
        pool_dim = cfg.mfe_channels * depth
        feature_dim = pool_dim if cfg.head_pooling == "avg" else pool_dim * cfg.patch * cfg.patch
        self.vision = VisionHead(feature_dim, n_classes, cfg.shared_dim, cfg.mfe_channels, cfg.head_pooling)
        self.text = TextEncoder(
            cfg.vocab_size, cfg.text_width, cfg.text_heads, cfg.text_layers, cfg.shared_dim,
            cfg.context_length,
        )
        self.refiner = PromptRefiner(cfg.shared_dim, cfg.refiner_heads, cfg.refiner_depth)
        self.logit_scale = nn.Parameter(
            torch.tensor(math.log(cfg.temperature_init)), requires_grad=cfg.learn_temperature
        )

    def encode_prompts(self, ids: torch.Tensor, eot: torch.Tensor) -> torch.Tensor:
        """(4C, L) ids in [T_c, T_d1, T_d2, T_d3] order -> refined (4, C, s)."""
        raw = self.text(ids, eot)
        return self.refiner(raw.view(4, self.n_classes, -1))

    def forward(self, x_hsi: torch.Tensor, x_lid: torch.Tensor, t: torch.Tensor):
        dec, trace = self.unet(x_hsi, x_lid, t)
        return dec, self.vision(dec.f_fus_de), trace


@dataclass
class PromptTokens:
    ids: torch.Tensor  # (4C, L)
    eot: torch.Tensor  # (4C,)


def prompt_tokens(manifest: PromptManifest, vocab: BPEVocab, context_length: int) -> PromptTokens:
    texts = [p for group in manifest.prompt_sets() for p in group]
    ids, eot = tokenize_batch(texts, vocab, context_length)
    return PromptTokens(torch.from_numpy(ids), torch.from_numpy(eot))


def to_channels_first(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))).to(dtype)


@dataclass
class StepOutputs:
    losses: LossBreakdown
    decoded: DecoderOutputs
    embedding: FusedEmbedding


def compute_losses(model: FusionModel, cfg: RunConfig, sched: DiffusionSchedule,
                   x_hsi: torch.Tensor, x_lid: torch.Tensor, y: torch.Tensor,
                   t: torch.Tensor, n_hsi: torch.Tensor, n_lid: torch.Tensor,
                   tokens: PromptTokens) -> StepOutputs:
    """Noise both modalities at ``t``, run the full model and assemble every loss.

    Inputs are channels-first tensors; ``y`` holds labels in 1..C.
    """
    xt_hsi = forward_diffuse(x_hsi, t.numpy(), n_hsi, sched)
    xt_lid = forward_diffuse(x_lid, t.numpy(), n_lid, sched)
    dec, emb, _ = model(xt_hsi, xt_lid, t)
    prompts = model.encode_prompts(tokens.ids, tokens.eot)
    temp = model.logit_scale.exp()
    sims = [similarity(prompts[k], emb.f_fus_proj, temp) for k in range(4)]
    l_c = loss_classification(emb.logits, y)
    l_n = loss_noise(n_hsi, n_lid, dec.n_hsi_pred, dec.n_lid_pred)
    mc, md, _ = loss_consistency(sims[0], sims[1:], y, cfg.alpha, cfg.symmetric_ce)
    return StepOutputs(loss_total(l_c, l_n, mc, md, cfg.alpha, cfg.lambdas), dec, emb)


def schedule_for(cfg: RunConfig) -> DiffusionSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
