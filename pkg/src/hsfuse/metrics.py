"""Accuracy metrics (CA / OA / AA / Kappa), report tables and map rendering."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (C, C), rows = truth
    ca: list[float]  # NaN for classes without truth pixels
    oa: float
    aa: float
    kappa: float
    class_names: list[str] = field(default_factory=list)
    train_counts: list[int] = field(default_factory=list)
    runtimes: dict = field(default_factory=dict)

    @property
    def test_counts(self) -> list[int]:
        return self.confusion.sum(axis=1).astype(int).tolist()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion"] = self.confusion.tolist()
        out["ca"] = [None if np.isnan(v) else v for v in self.ca]
        out["test_counts"] = self.test_counts
        return out

    def table(self) -> str:
        """Aligned text table: one row per class as "Name (train/test)", then OA/AA/Kappa."""
        C = self.confusion.shape[0]
        names = self.class_names or [f"class {i + 1}" for i in range(C)]
        train = self.train_counts or [0] * C
        labels = [f"{n} ({tr}/{te})" for n, tr, te in zip(names, train, self.test_counts)]
        w = max([len("Class(Train/Test)")] + [len(s) for s in labels])
        lines = [f"{'No.':>4}  {'Class(Train/Test)':<{w}}  {'CA (%)':>8}"]
        lines.append("-" * len(lines[0]))
        for i, (lab, ca) in enumerate(zip(labels, self.ca), start=1):
            val = "-" if np.isnan(ca) else f"{100 * ca:.2f}"
            lines.append(f"{i:>4}  {lab:<{w}}  {val:>8}")
        lines.append("-" * len(lines[0]))
        for key, val in (("OA", self.oa), ("AA", self.aa), ("Kappa", self.kappa)):
            lines.append(f"{'':>4}  {key:<{w}}  {100 * val:>8.2f}")
        for key, secs in self.runtimes.items():
            lines.append(f"{'':>4}  {key:<{w}}  {secs:>8.2f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        """Write JSON to ``path`` and the text table next to it (``.txt``)."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        path.with_suffix(".txt").write_text(self.table())


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """Confusion over pixels with truth > 0; rows index truth, columns prediction."""
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    m = truth > 0
    t = truth[m].astype(np.int64) - 1
    p = pred[m].astype(np.int64) - 1
    if p.size and (p.min() < 0 or p.max() >= n_classes):
        raise DataError(f"predictions must lie in 1..{n_classes}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def metrics_from_confusion(cm: np.ndarray) -> tuple[list[float], float, float, float]:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise DataError("empty test set")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.where(rows > 0, diag / rows, np.nan)
    present = rows > 0
    if not present.all():
        warnings.warn(
            f"classes {list(np.flatnonzero(~present) + 1)} have no truth pixels; excluded from AA",
            stacklevel=2,
        )
    oa = diag.sum() / total
    aa = float(np.mean(ca[present]))
    pe = float((rows * cols).sum()) / total**2
    kappa = (oa - pe) / (1.0 - pe) if pe < 1.0 else 1.0
    return ca.tolist(), float(oa), aa, float(kappa)


def evaluate(pred: np.ndarray, truth: np.ndarray, n_classes: int, **extra) -> MetricsReport:
    cm = confusion_matrix(pred, truth, n_classes)
    ca, oa, aa, kappa = metrics_from_confusion(cm)
    return MetricsReport(confusion=cm, ca=ca, oa=oa, aa=aa, kappa=kappa, **extra)


def render_map(pred: np.ndarray, palette, path: str | Path) -> Path:
    """Write ``pred`` as an RGB PNG with pixel colour palette[label - 1]; label 0 is black."""
    pal = np.asarray(palette, dtype=np.uint8).reshape(-1, 3)
    C = pal.shape[0]
    if pred.size and (pred.min() < 0 or pred.max() > C):
        raise DataError(f"palette has {C} colours but map contains label {int(pred.max())}")
    lut = np.vstack([np.zeros((1, 3), np.uint8), pal])
    img = lut[pred.astype(np.int64)]
    path = Path(path)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
    return path
