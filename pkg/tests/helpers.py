"""Shared test utilities: tiny configs and a kink-aware finite-difference audit."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from hsfuse.config import RunConfig
from hsfuse.model import FusionModel, compute_losses, prompt_tokens, schedule_for
from hsfuse.text.bpe import build_vocab
from hsfuse.text.manifest import generic_manifest

# One "PASS/FAIL name: detail" line per acceptance check, echoed in the
# terminal summary by conftest.py.
ACCEPTANCE_LINES: list[str] = []

LOSS_NAMES = ("loss_C", "loss_N", "loss_mc", "loss_md", "loss_M", "total")
# Denominator floor for relative error: below this a gradient entry is
# compared in absolute terms (float64 central-difference noise is ~1e-11).
REL_FLOOR = 1e-7


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        d=3, patch=9, T=50, enc_filters=(4, 8, 8), dec_filters=(8, 4, 4),
        dec_out_channels=6, temb_dim=8, mfe_channels=2, shared_dim=32,
        text_width=32, text_heads=4, text_layers=1, refiner_heads=4, refiner_depth=1,
        vocab_size=300, context_length=16, epochs=1, batch_size=6,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


@dataclass
class LossProblem:
    model: FusionModel
    cfg: RunConfig
    inputs: tuple

    def parts(self) -> list[torch.Tensor]:
        out = compute_losses(self.model, self.cfg, schedule_for(self.cfg), *self.inputs).losses
        return [getattr(out, n) for n in LOSS_NAMES]


def loss_problem(cfg: RunConfig, n_classes: int = 3, batch: int = 6, seed: int = 0,
                 dtype=torch.float64) -> LossProblem:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    manifest = generic_manifest([f"class {i}" for i in range(1, n_classes + 1)])
    vocab = build_vocab(manifest.corpus(), cfg.vocab_size)
    tokens = prompt_tokens(manifest, vocab, cfg.context_length)
    model = FusionModel(cfg, n_classes).to(dtype)
    p = cfg.patch
    x_hsi = torch.from_numpy(rng.random((batch, cfg.d, p, p))).to(dtype)
    x_lid = torch.from_numpy(rng.random((batch, 1, p, p))).to(dtype)
    y = torch.from_numpy(np.arange(batch) % n_classes + 1)
    t = torch.from_numpy(rng.integers(1, cfg.T + 1, size=batch))
    n_hsi = torch.from_numpy(rng.standard_normal(x_hsi.shape)).to(dtype)
    n_lid = torch.from_numpy(rng.standard_normal(x_lid.shape)).to(dtype)
    return LossProblem(model, cfg, (x_hsi, x_lid, y, t, n_hsi, n_lid, tokens))


@contextmanager
def activation_pattern(record: list):
    """Record every ReLU sign pattern and max-pool argmax during the block."""
    relu, max_pool2d = F.relu, F.max_pool2d

    def relu_rec(x, inplace=False):
        record.append((x > 0).flatten())
        return relu(x)

    def pool_rec(x, kernel_size, stride=None, padding=0, dilation=1, ceil_mode=False,
                 return_indices=False):
        out, idx = max_pool2d(x, kernel_size, stride, padding, dilation, ceil_mode, True)
        record.append(idx.flatten())
        return (out, idx) if return_indices else out

    F.relu, F.max_pool2d = relu_rec, pool_rec
    try:
        yield record
    finally:
        F.relu, F.max_pool2d = relu, max_pool2d


def _pattern(problem: LossProblem):
    rec: list = []
    with torch.no_grad(), activation_pattern(rec):
        vals = [float(v) for v in problem.parts()]
    return vals, rec


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradAudit:
    rel_err: dict  # loss name -> max relative error over probes
    probes: list  # (param name, flat index)
    rejected: int  # candidates whose stencil crossed a kink


def gradient_audit(problem: LossProblem, n_probes: int = 25, step: float = 1e-4,
                   seed: int = 0, max_candidates: int = 500) -> GradAudit:
    """Central differences against autograd for every loss term.

    Probes are drawn uniformly over (tensor, element). A candidate is used
    only if the ReLU and max-pool activation pattern is identical at x - h,
    x and x + h, i.e. the loss is smooth across the stencil; otherwise the
    difference quotient is not a valid derivative oracle and the candidate
    is counted as rejected.
    """
    rng = np.random.default_rng(seed)
    params = [(n, p) for n, p in problem.model.named_parameters() if p.requires_grad]
    parts = problem.parts()
    grads = [
        torch.autograd.grad(v, [p for _, p in params], allow_unused=True, retain_graph=True)
        for v in parts
    ]
    base_vals, base_pat = _pattern(problem)
    worst = {n: 0.0 for n in LOSS_NAMES}
    probes, rejected = [], 0
    for _ in range(max_candidates):
        if len(probes) == n_probes:
            break
        i = int(rng.integers(len(params)))
        name, p = params[i]
        j = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        old = flat[j].item()
        flat[j] = old + step
        up, pat_up = _pattern(problem)
        flat[j] = old - step
        dn, pat_dn = _pattern(problem)
        flat[j] = old
        if not (_same(pat_up, base_pat) and _same(pat_dn, base_pat)):
            rejected += 1
            continue
        probes.append((name, j))
        for m, loss in enumerate(LOSS_NAMES):
            g = grads[m][i]
            a = 0.0 if g is None else g.reshape(-1)[j].item()
            fd = (up[m] - dn[m]) / (2 * step)
            err = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            worst[loss] = max(worst[loss], err)
    if len(probes) < n_probes:
        raise RuntimeError(f"only {len(probes)} smooth probes in {max_candidates} candidates")
    return GradAudit(worst, probes, rejected)


def small_scene(seed: int = 0, C: int = 3, d: int = 3):
    """A 24x24 synthetic scene reduced to ``d`` bands, fast enough for unit tests."""
    from hsfuse.data_io import SynthConfig, prepare_scene, synth_scene

    raw = synth_scene(SynthConfig(M=24, N=24, D=8, C=C, min_pixels=30), seed)
    return prepare_scene(raw, d)


def brute_force_metrics(cm):
    """Reference OA/AA/Kappa by explicit loops over the confusion entries."""
    C = len(cm)
    total = correct = 0
    for i in range(C):
        for j in range(C):
            total += cm[i][j]
            if i == j:
                correct += cm[i][j]
    per_class = []
    for i in range(C):
        row = sum(cm[i][j] for j in range(C))
        if row:
            per_class.append(cm[i][i] / row)
    chance = 0.0
    for k in range(C):
        row = sum(cm[k][j] for j in range(C))
        col = sum(cm[i][k] for i in range(C))
        chance += row * col
    chance /= total * total
    po = correct / total
    return po, sum(per_class) / len(per_class), (po - chance) / (1 - chance)


@contextmanager
def criterion(name: str):
    """Record a PASS or FAIL line for one acceptance check.

    The block fills ``info["detail"]``; any exception (assertion or
    otherwise) is recorded as FAIL and re-raised.
    """
    info = {"detail": ""}
    try:
        yield info
    except Exception as exc:
        line = f"FAIL {name}: {info['detail']} {type(exc).__name__}: {exc}".strip()
        ACCEPTANCE_LINES.append(line.splitlines()[0])
        print(ACCEPTANCE_LINES[-1])
        raise
    else:
        ACCEPTANCE_LINES.append(f"PASS {name}: {info['detail']}")
        print(ACCEPTANCE_LINES[-1])
