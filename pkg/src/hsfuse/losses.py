"""Prompt/image cosine alignment and the combined multitask objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError

SYMMETRIC_CE_MODES = ("anchor", "simple")
LAMBDA_TOL = 1e-9


@dataclass
class SimilarityLogits:
    cor_c2m: torch.Tensor  # (B, C) sample-to-class
    cor_m2c: torch.Tensor  # (C, B)
    temperature: torch.Tensor


def similarity(f_text: torch.Tensor, f_vis: torch.Tensor, temperature) -> SimilarityLogits:
    """Scaled cosine similarities between (C, s) prompt and (B, s) image embeddings."""
    temperature = torch.as_tensor(temperature, dtype=f_vis.dtype)
    if float(temperature.detach()) <= 0:
        raise ConfigError("temperature", "must be positive")
    tn = f_text.norm(dim=-1, keepdim=True)
    vn = f_vis.norm(dim=-1, keepdim=True)
    if (tn == 0).any() or (vn == 0).any():
        raise DataError("zero-norm embedding row in similarity")
    c2m = temperature * (f_vis / vn) @ (f_text / tn).t()
    return SimilarityLogits(cor_c2m=c2m, cor_m2c=c2m.t(), temperature=temperature)


def loss_noise(n_hsi, n_lid, pred_hsi, pred_lid) -> torch.Tensor:
    if n_hsi.shape != pred_hsi.shape or n_lid.shape != pred_lid.shape:
        raise ConfigError("noise", "predicted and true noise shapes differ")
    return 0.5 * (F.mse_loss(pred_hsi, n_hsi) + F.mse_loss(pred_lid, n_lid))


def loss_classification(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy from logits; ``y`` holds 1-based labels."""
    C = logits.shape[-1]
    if y.numel() and (int(y.min()) < 1 or int(y.max()) > C):
        raise DataError(f"labels must lie in 1..{C}")
    return F.cross_entropy(logits, y - 1)


def anchor_indices(y: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Batch index of the first sample of every class (the class anchor)."""
    anchors = torch.full((n_classes,), -1, dtype=torch.long)
    for b in range(y.shape[0] - 1, -1, -1):
        anchors[int(y[b]) - 1] = b
    missing = (anchors < 0).nonzero().flatten()
    if missing.numel():
        raise DataError(
            f"class-to-sample term needs every class in the batch; missing {(missing + 1).tolist()}"
        )
    return anchors


def symmetric_ce(sims: SimilarityLogits, y: torch.Tensor, mode: str = "anchor",
                 anchors: torch.Tensor | None = None) -> torch.Tensor:
    """Average of the sample-to-class and class-to-sample cross-entropies.

    In ``anchor`` mode the class-to-sample target of class c is its anchor's
    batch index; other samples of the same class are left out of that row's
    softmax so they are not pushed away from their own prompt. ``simple`` mode
    uses the sample-to-class term for both halves.
    """
    ce_c2m = F.cross_entropy(sims.cor_c2m, y - 1)
    if mode == "simple":
        return ce_c2m
    if mode != "anchor":
        raise ConfigError("symmetric_ce", f"must be one of {SYMMETRIC_CE_MODES}, got {mode!r}")
    C = sims.cor_m2c.shape[0]
    if anchors is None:
        anchors = anchor_indices(y, C)
    same = (y - 1)[None, :] == torch.arange(C)[:, None]
    same[torch.arange(C), anchors] = False
    logits = sims.cor_m2c.masked_fill(same, float("-inf"))
    ce_m2c = F.cross_entropy(logits, anchors)
    return 0.5 * (ce_c2m + ce_m2c)


def loss_consistency(sims_c: SimilarityLogits, sims_d: list[SimilarityLogits], y: torch.Tensor,
                     alpha: float, mode: str = "anchor"):
    """Returns (loss_mc, loss_md, loss_M)."""
    anchors = anchor_indices(y, sims_c.cor_m2c.shape[0]) if mode == "anchor" else None
    mc = symmetric_ce(sims_c, y, mode, anchors)
    md = sum(symmetric_ce(s, y, mode, anchors) for s in sims_d) / len(sims_d)
    return mc, md, alpha * mc + (1.0 - alpha) * md


def validate_lambdas(lambdas) -> tuple[float, float, float]:
    lam = tuple(float(v) for v in lambdas)
    if len(lam) != 3:
        raise ConfigError("lambdas", f"need three weights, got {len(lam)}")
    if any(v < 0 for v in lam):
        raise ConfigError("lambdas", f"weights must be non-negative, got {lam}")
    if abs(sum(lam) - 1.0) > LAMBDA_TOL:
        raise ConfigError("lambdas", f"weights must sum to 1, got {lam} (sum {sum(lam)!r})")
    return lam


@dataclass
class LossBreakdown:
    loss_C: torch.Tensor
    loss_N: torch.Tensor
    loss_mc: torch.Tensor
    loss_md: torch.Tensor
    loss_M: torch.Tensor
    total: torch.Tensor
    alpha: float
    lambdas: tuple[float, float, float]

    def record(self, step: int) -> dict:
        rec = {"step": step}
        for name in ("loss_C", "loss_N", "loss_mc", "loss_md", "loss_M", "total"):
            rec[name] = float(torch.as_tensor(getattr(self, name)).detach())
        return rec


def loss_total(loss_C, loss_N, loss_mc, loss_md, alpha: float, lambdas) -> LossBreakdown:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha", f"must lie in [0, 1], got {alpha}")
    lam = validate_lambdas(lambdas)
    loss_M = alpha * loss_mc + (1.0 - alpha) * loss_md
    total = lam[0] * loss_C + lam[1] * loss_N + lam[2] * loss_M
    return LossBreakdown(loss_C, loss_N, loss_mc, loss_md, loss_M, total, alpha, lam)
