"""Ablation grids over fusion strategy, loss terms, loss weights, refiner depth,
patch size and PCA dimension."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data_io import SceneBundle, normalize, pca_reduce
from .diffusion import FUSION_STRATEGIES
from .errors import ConfigError
from .losses import validate_lambdas
from .metrics import evaluate
from .model import count_parameters
from .text.manifest import PromptManifest
from .train import heldout_truth, predict, train

logger = logging.getLogger(__name__)

AXES = ("fusion_strategy", "loss_terms", "lambda_grid", "e_grid", "patch_grid", "dim_grid")

# Inclusion pattern (classification, noise, consistency). Included terms keep
# their default ratio 0.6 : 0.2 : 0.2, renormalised to sum to 1.
LOSS_TERM_ROWS = (
    ("C", (1.0, 0.0, 0.0)),
    ("C+N", (0.75, 0.25, 0.0)),
    ("C+M", (0.75, 0.0, 0.25)),
    ("C+N+M", (0.6, 0.2, 0.2)),
)
LAMBDA_ROWS = ((0.2, 0.4, 0.4), (0.4, 0.3, 0.3), (0.6, 0.2, 0.2), (0.8, 0.1, 0.1))
E_GRID = (1, 2, 3, 4, 5)
PATCH_GRID = (7, 9, 11, 13)
DIM_GRID = (4, 8, 12, 16)


@dataclass
class AblationRow:
    setting: str
    oa: float
    aa: float
    kappa: float
    parameters: int
    train_seconds: float
    test_seconds: float


def grid(axis: str, cfg: RunConfig, raw_bands: int | None = None) -> list[tuple[str, RunConfig]]:
    """Expand one axis into (label, config) pairs."""
    if axis == "fusion_strategy":
        return [(s, cfg.replace(fusion_strategy=s)) for s in FUSION_STRATEGIES]
    if axis == "loss_terms":
        return [(name, cfg.replace(lambdas=lam)) for name, lam in LOSS_TERM_ROWS]
    if axis == "lambda_grid":
        rows = []
        for lam in LAMBDA_ROWS:
            validate_lambdas(lam)
            rows.append(("/".join(f"{v:g}" for v in lam), cfg.replace(lambdas=lam)))
        return rows
    if axis == "e_grid":
        return [(f"e={e}", cfg.replace(refiner_depth=e)) for e in E_GRID]
    if axis == "patch_grid":
        return [(f"patch={p}", cfg.replace(patch=p)) for p in PATCH_GRID]
    if axis == "dim_grid":
        dims = [d for d in DIM_GRID if raw_bands is None or d <= raw_bands]
        return [(f"d={d}", cfg.replace(d=d)) for d in dims]
    raise ConfigError("axis", f"unknown axis {axis!r}; choose from {AXES}")


def ablate(cfg: RunConfig, axis: str, raw_scene: SceneBundle, manifest: PromptManifest) -> list[AblationRow]:
    """Train and score one model per grid setting on an unreduced scene.

    The scene is PCA-reduced and normalised per setting so ``dim_grid`` can
    vary the band count.
    """
    rows = []
    prepared: dict[int, SceneBundle] = {}
    for label, sub in grid(axis, cfg, raw_scene.D):
        sub.validate()
        if sub.d not in prepared:
            prepared[sub.d] = normalize(pca_reduce(raw_scene, sub.d))
        scene = prepared[sub.d]
        ckpt, hist = train(sub, scene, manifest)
        start = time.perf_counter()
        pred = predict(ckpt, scene)
        test_seconds = time.perf_counter() - start
        rep = evaluate(pred, heldout_truth(scene, ckpt), scene.C)
        rows.append(AblationRow(label, rep.oa, rep.aa, rep.kappa, count_parameters(ckpt.model),
                                hist.train_seconds, test_seconds))
        logger.info("%s: OA %.4f AA %.4f Kappa %.4f", label, rep.oa, rep.aa, rep.kappa)
    return rows


def format_rows(axis: str, rows: list[AblationRow]) -> str:
    head = f"{axis:<18} {'OA':>7} {'AA':>7} {'Kappa':>7} {'Params':>12} {'Train(s)':>9} {'Test(s)':>8}"
    out = [head, "-" * len(head)]
    for r in rows:
        out.append(
            f"{r.setting:<18} {100 * r.oa:>7.2f} {100 * r.aa:>7.2f} {100 * r.kappa:>7.2f} "
            f"{r.parameters:>12,} {r.train_seconds:>9.2f} {r.test_seconds:>8.2f}"
        )
    return "\n".join(out) + "\n"


def repeat_runs(cfg: RunConfig, scene: SceneBundle, manifest: PromptManifest) -> dict:
    """Train once per entry of ``repeat_seeds`` (model and split seed both set to it).

    Returns per-run OA/AA/Kappa plus their mean and standard deviation.
    """
    runs = []
    for seed in cfg.repeat_seeds:
        sub = cfg.replace(seed=int(seed), split_seed=int(seed))
        ckpt, _ = train(sub, scene, manifest)
        rep = evaluate(predict(ckpt, scene), heldout_truth(scene, ckpt), scene.C)
        runs.append({"seed": int(seed), "oa": rep.oa, "aa": rep.aa, "kappa": rep.kappa})
    out = {"runs": runs}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([r[key] for r in runs])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
