"""Scene bundles, spectral preprocessing and patch sampling.

A scene bundle is a directory holding a JSON header plus three raw
little-endian arrays::

    header.json   M, N, D, C, class_names, palette, dtype tags, flags
    hsi.f32       float32, band-sequential (D x M x N), row-major
    lidar.f32     float32, M x N
    labels.i32    int32,   M x N, 0 = unlabeled, 1..C = class

The raw layout keeps bundles byte-identical across tools that do not share a
scientific container format.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

HEADER_NAME = "header.json"
HSI_NAME = "hsi.f32"
LIDAR_NAME = "lidar.f32"
LABELS_NAME = "labels.i32"
BUNDLE_FORMAT = "hsfuse-bundle"

# 16 visually distinct colours; synthetic scenes take the first C.
DEFAULT_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (0, 0, 128),
]


@dataclass
class SceneBundle:
    """Co-registered HSI cube, LiDAR raster and label map.

    Attributes:
        hsi: float32 array (M, N, D).
        lidar: float32 array (M, N, 1).
        labels: int32 array (M, N); 0 marks unlabeled pixels.
        class_names: one name per class, in label order.
        palette: one RGB triple per class.
        pca_reduced: set once :func:`pca_reduce` has been applied.
        normalized: set once :func:`normalize` has been applied.
    """

    hsi: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    palette: list[tuple[int, int, int]]
    pca_reduced: bool = False
    normalized: bool = False

    @property
    def M(self) -> int:
        return int(self.labels.shape[0])

    @property
    def N(self) -> int:
        return int(self.labels.shape[1])

    @property
    def D(self) -> int:
        return int(self.hsi.shape[2])

    @property
    def C(self) -> int:
        return len(self.class_names)

    def validate(self) -> "SceneBundle":
        if self.hsi.ndim != 3:
            raise DataError(f"hsi must be M x N x D, got shape {self.hsi.shape}")
        if self.lidar.ndim != 3 or self.lidar.shape[2] != 1:
            raise DataError(f"lidar must be M x N x 1, got shape {self.lidar.shape}")
        if self.labels.ndim != 2:
            raise DataError(f"labels must be M x N, got shape {self.labels.shape}")
        spatial = self.labels.shape
        if self.hsi.shape[:2] != spatial or self.lidar.shape[:2] != spatial:
            raise DataError(
                f"spatial dims differ: hsi {self.hsi.shape[:2]}, "
                f"lidar {self.lidar.shape[:2]}, labels {spatial}"
            )
        if len(self.palette) != self.C:
            raise DataError(f"palette has {len(self.palette)} entries for {self.C} classes")
        if len(set(self.class_names)) != self.C:
            raise DataError("duplicate class names")
        lo, hi = int(self.labels.min()), int(self.labels.max())
        if lo < 0 or hi > self.C:
            raise DataError(f"labels must lie in 0..{self.C}, found range {lo}..{hi}")
        present = np.bincount(self.labels.ravel(), minlength=self.C + 1)[1:]
        missing = [self.class_names[i] for i in np.flatnonzero(present == 0)]
        if missing:
            raise DataError(f"classes without any labeled pixel: {missing}")
        if not np.isfinite(self.hsi).all():
            raise DataError("hsi contains NaN or Inf")
        if not np.isfinite(self.lidar).all():
            raise DataError("lidar contains NaN or Inf")
        return self


def save_bundle(scene: SceneBundle, path: str | Path) -> Path:
    scene.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format": BUNDLE_FORMAT,
        "version": 1,
        "M": scene.M,
        "N": scene.N,
        "D": scene.D,
        "C": scene.C,
        "class_names": list(scene.class_names),
        "palette": [list(map(int, rgb)) for rgb in scene.palette],
        "dtypes": {"hsi": "<f4", "lidar": "<f4", "labels": "<i4"},
        "hsi_layout": "band-sequential",
        "pca_reduced": scene.pca_reduced,
        "normalized": scene.normalized,
    }
    (out / HEADER_NAME).write_text(json.dumps(header, indent=2) + "\n")
    # band-sequential: D x M x N
    bsq = np.ascontiguousarray(np.transpose(scene.hsi, (2, 0, 1)), dtype="<f4")
    (out / HSI_NAME).write_bytes(bsq.tobytes())
    (out / LIDAR_NAME).write_bytes(np.ascontiguousarray(scene.lidar[..., 0], dtype="<f4").tobytes())
    (out / LABELS_NAME).write_bytes(np.ascontiguousarray(scene.labels, dtype="<i4").tobytes())
    return out


def _read_raw(path: Path, dtype: str, count: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise DataError(
            f"dimension mismatch in {what}: header implies {count} values "
            f"({count * itemsize} bytes), payload has {len(raw)} bytes"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def load_bundle(path: str | Path) -> SceneBundle:
    root = Path(path)
    header_path = root / HEADER_NAME
    if not header_path.is_file():
        raise DataError(f"missing file: {header_path}")
    try:
        header = json.loads(header_path.read_text())
        M, N, D, C = (int(header[k]) for k in ("M", "N", "D", "C"))
        class_names = [str(s) for s in header["class_names"]]
        palette = [tuple(int(v) for v in rgb) for rgb in header["palette"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed header {header_path}: {exc}") from exc
    if len(class_names) != C:
        raise DataError(f"header lists {len(class_names)} class names but C={C}")

    hsi = _read_raw(root / HSI_NAME, "<f4", D * M * N, "hsi").reshape(D, M, N)
    lidar = _read_raw(root / LIDAR_NAME, "<f4", M * N, "lidar").reshape(M, N, 1)
    labels = _read_raw(root / LABELS_NAME, "<i4", M * N, "labels").reshape(M, N)
    scene = SceneBundle(
        hsi=np.ascontiguousarray(np.transpose(hsi, (1, 2, 0)), dtype=np.float32),
        lidar=lidar.astype(np.float32),
        labels=labels.astype(np.int32),
        class_names=class_names,
        palette=palette,
        pca_reduced=bool(header.get("pca_reduced", False)),
        normalized=bool(header.get("normalized", False)),
    )
    return scene.validate()


# --------------------------------------------------------------------------
# spectral preprocessing
# --------------------------------------------------------------------------


@dataclass
class PCAModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (D, d), orthonormal columns
    explained_variance: np.ndarray  # (d,)
    explained_variance_ratio: np.ndarray  # (d,)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components.T + self.mean


def fit_pca(pixels: np.ndarray, d: int) -> PCAModel:
    """Fit a PCA basis on a (P, D) pixel matrix.

    Eigenvectors of the band covariance are ordered by descending eigenvalue and
    sign-fixed so that each one's largest-magnitude entry is positive.
    """
    P, D = pixels.shape
    if not 1 <= d <= D:
        raise DataError(f"PCA dimension must satisfy 1 <= d <= D={D}, got d={d}")
    if P < 2:
        raise DataError("covariance needs at least 2 pixels")
    x = pixels.astype(np.float64)
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(D, D)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(D)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    total = evals.sum()
    ratio = evals / total if total > 0 else np.zeros_like(evals)
    return PCAModel(
        mean=mean,
        components=evecs[:, :d],
        explained_variance=evals[:d],
        explained_variance_ratio=ratio[:d],
    )


def pca_reduce(scene: SceneBundle, d: int) -> SceneBundle:
    """Project the HSI cube onto its top-``d`` principal components."""
    if scene.pca_reduced:
        raise DataError("scene is already PCA-reduced")
    M, N, D = scene.hsi.shape
    model = fit_pca(scene.hsi.reshape(M * N, D), d)
    reduced = model.transform(scene.hsi.reshape(M * N, D).astype(np.float64))
    logger.info(
        "PCA %d -> %d bands, retained variance %.4f", D, d, model.explained_variance_ratio.sum()
    )
    return replace(
        scene, hsi=reduced.reshape(M, N, d).astype(np.float32), pca_reduced=True
    )


def _minmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    lo = x.min(axis=(0, 1), keepdims=True)
    span = x.max(axis=(0, 1), keepdims=True) - lo
    out = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.astype(np.float32)


def normalize(scene: SceneBundle) -> SceneBundle:
    """Min-max scale every HSI band and the LiDAR channel to [0, 1].

    Constant channels map to 0.
    """
    return replace(scene, hsi=_minmax(scene.hsi), lidar=_minmax(scene.lidar), normalized=True)


# --------------------------------------------------------------------------
# splits and patches
# --------------------------------------------------------------------------


@dataclass
class SplitSpec:
    per_class_train_counts: list[int]
    seed: int = 0
    remainder_is_test: bool = True


@dataclass
class PatchBatch:
    """Patches centred on labeled pixels, channels last.

    ``x_hsi`` is (B, m, n, d), ``x_lid`` is (B, m, n, 1), ``y`` holds labels in
    1..C and ``centers`` the (row, col) of each patch centre.
    """

    x_hsi: np.ndarray
    x_lid: np.ndarray
    y: np.ndarray
    centers: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])


def split_centers(scene: SceneBundle, split: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Pick per-class training centres; return (train, test) as (K, 2) arrays."""
    C = scene.C
    counts = list(split.per_class_train_counts)
    if len(counts) != C:
        raise DataError(f"split lists {len(counts)} counts for {C} classes")
    rng = np.random.default_rng(split.seed)
    flat = scene.labels.ravel()
    train, test = [], []
    for c in range(1, C + 1):
        pool = np.flatnonzero(flat == c)
        want = int(counts[c - 1])
        if want < 0:
            raise DataError(f"negative train count for class {c}")
        if want > 0 and pool.size == 0:
            raise DataError(f"class {c} ({scene.class_names[c - 1]}) has no labeled pixels")
        if want > pool.size:
            raise DataError(
                f"class {c} requests {want} training pixels but only {pool.size} are labeled"
            )
        chosen = np.zeros(pool.size, dtype=bool)
        chosen[rng.permutation(pool.size)[:want]] = True
        train.append(pool[chosen])
        if split.remainder_is_test:
            test.append(pool[~chosen])
    to_rc = lambda idx: np.stack(np.unravel_index(idx, scene.labels.shape), axis=1).astype(np.int64)
    train_idx = np.concatenate(train) if train else np.zeros(0, dtype=np.int64)
    test_idx = np.concatenate(test) if test else np.zeros(0, dtype=np.int64)
    return to_rc(train_idx), to_rc(test_idx)


def pad_scene(scene: SceneBundle, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Mirror-pad HSI and LiDAR by ``patch // 2`` on each spatial edge."""
    r = patch // 2
    width = ((r, r), (r, r), (0, 0))
    return np.pad(scene.hsi, width, mode="reflect"), np.pad(scene.lidar, width, mode="reflect")


def patches_at(
    padded_hsi: np.ndarray, padded_lid: np.ndarray, centers: np.ndarray, patch: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cut (patch x patch) windows from pre-padded rasters at the given centres."""
    rows = centers[:, 0][:, None] + np.arange(patch)[None, :]
    cols = centers[:, 1][:, None] + np.arange(patch)[None, :]
    x_hsi = padded_hsi[rows[:, :, None], cols[:, None, :]]
    x_lid = padded_lid[rows[:, :, None], cols[:, None, :]]
    return x_hsi, x_lid


def extract_patches(
    scene: SceneBundle, split: SplitSpec, patch: int
) -> tuple[PatchBatch, PatchBatch]:
    if patch < 1 or patch % 2 == 0:
        raise DataError(f"patch size must be odd, got {patch}")
    train_c, test_c = split_centers(scene, split)
    padded_hsi, padded_lid = pad_scene(scene, patch)

    def build(centers: np.ndarray) -> PatchBatch:
        x_hsi, x_lid = patches_at(padded_hsi, padded_lid, centers, patch)
        y = scene.labels[centers[:, 0], centers[:, 1]].astype(np.int64)
        return PatchBatch(x_hsi=x_hsi, x_lid=x_lid, y=y, centers=centers)

    return build(train_c), build(test_c)


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


@dataclass
class SynthConfig:
    M: int = 64
    N: int = 64
    D: int = 32
    C: int = 6
    noise: float = 0.02
    sites_per_class: int = 1
    min_pixels: int = 50
    height_step: float = 3.0
    max_retries: int = 50
    class_names: Sequence[str] | None = field(default=None)


def synth_scene(config: SynthConfig, seed: int) -> SceneBundle:
    """Generate a deterministic Voronoi-partitioned scene.

    Each class owns ``sites_per_class`` Voronoi sites, a Gaussian-bump spectral
    signature over D bands and a distinct LiDAR base height. Gaussian noise with
    std ``noise`` (HSI) and ``noise * height_step`` (LiDAR) is added.
    """
    M, N, D, C = config.M, config.N, config.D, config.C
    if not 1 <= C <= 16:
        raise DataError(f"synthetic scenes support 1..16 classes, got {C}")
    if M * N < C * config.min_pixels:
        raise DataError(f"{M}x{N} scene cannot hold {C} classes of {config.min_pixels} pixels")
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:M, 0:N]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)

    labels = None
    for _ in range(config.max_retries):
        sites = rng.uniform((0, 0), (M, N), size=(C * config.sites_per_class, 2))
        owner = np.arange(sites.shape[0]) % C
        d2 = ((grid[:, None, :] - sites[None, :, :]) ** 2).sum(-1)
        cand = (owner[np.argmin(d2, axis=1)] + 1).reshape(M, N).astype(np.int32)
        if np.bincount(cand.ravel(), minlength=C + 1)[1:].min() >= config.min_pixels:
            labels = cand
            break
    if labels is None:
        raise DataError(
            f"could not place {C} regions of >= {config.min_pixels} pixels "
            f"after {config.max_retries} attempts"
        )

    bands = np.linspace(0.0, 1.0, D)
    centres = (rng.permutation(C) + rng.uniform(0.2, 0.8, C)) / C
    widths = rng.uniform(0.05, 0.2, C)
    amps = rng.uniform(0.3, 0.8, C)
    bases = rng.uniform(0.1, 0.3, C)
    signatures = bases[:, None] + amps[:, None] * np.exp(
        -((bands[None, :] - centres[:, None]) ** 2) / (2 * widths[:, None] ** 2)
    )
    heights = 1.0 + config.height_step * rng.permutation(C).astype(np.float64)

    hsi = signatures[labels - 1] + config.noise * rng.standard_normal((M, N, D))
    lidar = heights[labels - 1][..., None] + config.noise * config.height_step * rng.standard_normal(
        (M, N, 1)
    )
    names = list(config.class_names) if config.class_names else [f"class {i + 1}" for i in range(C)]
    return SceneBundle(
        hsi=hsi.astype(np.float32),
        lidar=lidar.astype(np.float32),
        labels=labels,
        class_names=names,
        palette=list(DEFAULT_PALETTE[:C]),
    ).validate()


def prepare_scene(scene: SceneBundle, d: int) -> SceneBundle:
    """PCA-reduce to ``d`` bands, then min-max normalise."""
    return normalize(pca_reduce(scene, d))
