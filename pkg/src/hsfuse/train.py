"""Training loop, checkpoints and full-scene prediction."""

from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data_io import SceneBundle, SplitSpec, extract_patches, pad_scene, patches_at
from .errors import ConfigError, DataError, NumericError
from .model import FusionModel, compute_losses, prompt_tokens, schedule_for, to_channels_first
from .text.bpe import BPEVocab, build_vocab
from .text.manifest import PromptManifest, manifest_from_dict

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    train_seconds: float = 0.0

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])


@dataclass
class Checkpoint:
    model: FusionModel
    config: RunConfig
    vocab: BPEVocab
    manifest: PromptManifest
    train_centers: np.ndarray  # (K, 2) pixels used for training


@contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin torch to deterministic kernels for the duration of the block."""
    prev = torch.are_deterministic_algorithms_enabled()
    prev_warn = torch.is_deterministic_algorithms_warn_only_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev, warn_only=prev_warn)


def balanced_batches(y: np.ndarray, n_classes: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays for one epoch of class-balanced batches.

    Each batch holds ``batch_size // C`` (at least 1) samples of every class
    that has training data, class-major so the first sample of each class is
    its anchor. Smaller classes are cycled to fill the epoch.
    """
    per_class = [np.flatnonzero(y == c) for c in range(1, n_classes + 1)]
    per_class = [rng.permutation(idx) for idx in per_class if idx.size]
    if not per_class:
        return
    k = max(1, batch_size // n_classes)
    n_steps = math.ceil(max(idx.size for idx in per_class) / k)
    for j in range(n_steps):
        picks = [idx[(j * k + np.arange(k)) % idx.size] for idx in per_class]
        yield np.concatenate(picks)


def train(config: RunConfig, scene: SceneBundle, manifest: PromptManifest,
          log_path: str | Path | None = None, dtype=torch.float32) -> tuple[Checkpoint, History]:
    cfg = config.validate()
    if manifest.n_classes != scene.C:
        raise DataError(f"manifest has {manifest.n_classes} classes, scene has {scene.C}")
    if scene.D != cfg.d:
        raise ConfigError("d", f"scene has {scene.D} bands, config expects d={cfg.d}; run prepare first")
    counts = cfg.train_counts(scene.C)
    if cfg.symmetric_ce == "anchor" and min(counts) < 1:
        raise ConfigError("train_per_class", "anchor mode needs at least one training pixel per class")
    train_set, _ = extract_patches(scene, SplitSpec(counts, cfg.split_seed, remainder_is_test=False), cfg.patch)

    vocab = build_vocab(manifest.corpus(), cfg.vocab_size)
    tokens = prompt_tokens(manifest, vocab, cfg.context_length)
    sched = schedule_for(cfg)

    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        model = FusionModel(cfg, scene.C)
        if cfg.text_weights:
            if not Path(cfg.text_weights).is_file():
                raise DataError(f"missing file: {cfg.text_weights}")
            names = model.text.load_weights(cfg.text_weights)
            logger.info("loaded %d text-encoder tensors from %s", len(names), cfg.text_weights)
        model = model.to(dtype)
        rng = np.random.default_rng(cfg.seed)
        opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
        x_hsi_all = to_channels_first(train_set.x_hsi, dtype)
        x_lid_all = to_channels_first(train_set.x_lid, dtype)
        y_all = torch.from_numpy(train_set.y)

        history = History()
        log_file = open(log_path, "w") if log_path else None
        start = time.perf_counter()
        step = 0
        try:
            model.train()
            for epoch in range(cfg.epochs):
                for idx in balanced_batches(train_set.y, scene.C, cfg.batch_size, rng):
                    idx_t = torch.from_numpy(idx)
                    x_hsi, x_lid, y = x_hsi_all[idx_t], x_lid_all[idx_t], y_all[idx_t]
                    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(idx)))
                    n_hsi = torch.from_numpy(rng.standard_normal(x_hsi.shape)).to(dtype)
                    n_lid = torch.from_numpy(rng.standard_normal(x_lid.shape)).to(dtype)
                    out = compute_losses(model, cfg, sched, x_hsi, x_lid, y, t, n_hsi, n_lid, tokens)
                    total = out.losses.total
                    if not torch.isfinite(total):
                        raise NumericError(f"non-finite loss at step {step}: {out.losses.record(step)}")
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    opt.step()
                    rec = out.losses.record(step)
                    rec["epoch"] = epoch
                    history.records.append(rec)
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                    step += 1
                if epoch % 20 == 0 or epoch == cfg.epochs - 1:
                    logger.info("epoch %d step %d total %.4f", epoch, step, history.records[-1]["total"])
        finally:
            if log_file:
                log_file.close()
        history.train_seconds = time.perf_counter() - start
        model.eval()
    return Checkpoint(model, cfg, vocab, manifest, train_set.centers), history


@torch.no_grad()
def predict(ckpt: Checkpoint, scene: SceneBundle, batch: int | None = None,
            return_proba: bool = False):
    """Label every pixel (1..C) from a zero-noise pass at ``predict_t``.

    Patches are mirror-padded at the borders; the result does not depend on
    ``batch`` beyond floating-point summation order.
    """
    cfg = ckpt.config
    if scene.D != cfg.d:
        raise DataError(f"scene has {scene.D} bands but checkpoint expects d={cfg.d}")
    if scene.C != ckpt.model.n_classes:
        raise DataError(f"scene has {scene.C} classes but checkpoint was trained on {ckpt.model.n_classes}")
    batch = batch or cfg.predict_batch
    model = ckpt.model.eval()
    dtype = next(model.parameters()).dtype
    sched = schedule_for(cfg)
    coef = math.sqrt(sched.alpha_bar[cfg.predict_t - 1])

    padded_hsi, padded_lid = pad_scene(scene, cfg.patch)
    rr, cc = np.mgrid[0:scene.M, 0:scene.N]
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    probs = np.empty((centers.shape[0], scene.C), dtype=np.float64)
    with deterministic_mode(cfg.deterministic):
        for s in range(0, centers.shape[0], batch):
            chunk = centers[s : s + batch]
            ph, pl = patches_at(padded_hsi, padded_lid, chunk, cfg.patch)
            x_hsi = to_channels_first(ph, dtype) * coef
            x_lid = to_channels_first(pl, dtype) * coef
            t = torch.full((len(chunk),), cfg.predict_t, dtype=torch.long)
            _, emb, _ = model(x_hsi, x_lid, t)
            probs[s : s + len(chunk)] = emb.y_hat.double().numpy()
    pred = (probs.argmax(axis=1) + 1).reshape(scene.M, scene.N).astype(np.int32)
    if return_proba:
        return pred, probs.reshape(scene.M, scene.N, scene.C)
    return pred


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# A checkpoint is one .npz archive. Parameter and buffer arrays are stored
# under their module path, e.g. "unet.enc_hsi.blocks.0.conv1.weight"; the
# reserved keys "__config__", "__merges__", "__manifest__" hold UTF-8 text and
# "__train_centers__" the (K, 2) training pixel coordinates.


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in ckpt.model.state_dict().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(ckpt.config.to_dict()))
    arrays["__merges__"] = np.array(ckpt.vocab.to_text())
    arrays["__manifest__"] = np.array(json.dumps(ckpt.manifest.to_dict()))
    arrays["__train_centers__"] = np.asarray(ckpt.train_centers, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with np.load(path, allow_pickle=False) as data:
        cfg = RunConfig.from_dict(json.loads(str(data["__config__"])))
        vocab = BPEVocab.from_text(str(data["__merges__"]))
        manifest = manifest_from_dict(json.loads(str(data["__manifest__"])))
        centers = data["__train_centers__"]
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if not k.startswith("__")}
    model = FusionModel(cfg, manifest.n_classes)
    dtype = next(iter(v for k, v in state.items() if v.is_floating_point())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, cfg, vocab, manifest, centers)


def heldout_truth(scene: SceneBundle, ckpt: Checkpoint) -> np.ndarray:
    """Label map with the checkpoint's training pixels blanked out."""
    truth = scene.labels.copy()
    c = ckpt.train_centers
    if c.size:
        truth[c[:, 0], c[:, 1]] = 0
    return truth


def train_counts_map(scene: SceneBundle, ckpt: Checkpoint) -> np.ndarray:
    counts = np.zeros(scene.C, dtype=np.int64)
    c = ckpt.train_centers
    if c.size:
        labels = scene.labels[c[:, 0], c[:, 1]]
        counts += np.bincount(labels, minlength=scene.C + 1)[1:]
    return counts
