"""Image embeddings and mutual-information feature selection.

Two embedding backends produce 512-dimensional rows per image: a frozen
pretrained 18-layer residual network (global average pool activations) and a
hermetic hand-crafted descriptor that needs no downloaded weights and is
bit-reproducible across machines. Selection keeps the floor(sqrt(N)) columns
with the highest binned mutual information against the labels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import ImageSample, Manifest

FMAT_MAGIC = b"FMAT1"
EMBED_DIM = 512
DEFAULT_MI_BINS = 16


class FeatureError(Exception):
    pass


class BackendUnavailableError(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # (n, d) float32
    row_ids: tuple[str, ...]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise FeatureError(f"expected 2-D matrix, got shape {v.shape}")
        if len(self.row_ids) != v.shape[0]:
            raise FeatureError("row_ids length does not match row count")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise FeatureError("row_ids must be unique")
        if not np.all(np.isfinite(v)):
            raise FeatureError("feature matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SelectionMask:
    selected_columns: tuple[int, ...]
    k: int
    mi_scores: np.ndarray  # per-column scores over the full width

    def __post_init__(self):
        if len(self.selected_columns) != self.k:
            raise FeatureError("mask size does not match k")


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------


def _hermetic_descriptor(img: np.ndarray) -> np.ndarray:
    """512-dim hand-crafted descriptor: intensity grid, oriented gradients,
    row/column profiles and extrema. Deterministic, no learned weights."""
    f = np.asarray(Image.fromarray(img, mode="L").resize((64, 64), Image.BILINEAR),
                   dtype=np.float64) / 255.0

    blocks8 = f.reshape(8, 8, 8, 8).swapaxes(1, 2).reshape(64, 64)  # 64 cells of 8x8
    grid_mean = blocks8.mean(axis=1)  # 64
    grid_std = blocks8.std(axis=1)  # 64

    gy, gx = np.gradient(f)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), math.pi)  # unsigned orientation
    bin_idx = np.minimum((ang / math.pi * 8).astype(np.int64), 7)
    cell = (np.arange(64) // 16)  # 4 cells per axis
    cell_idx = cell[:, None] * 4 + cell[None, :]
    hog = np.zeros((16, 8))
    np.add.at(hog, (cell_idx.ravel(), bin_idx.ravel()), mag.ravel())
    hog = (hog / (hog.sum() + 1e-9)).ravel()  # 128

    row_mean = f.mean(axis=1)  # 64
    col_mean = f.mean(axis=0)  # 64
    rows32 = f.reshape(32, 2, 64)
    row_min = rows32.min(axis=(1, 2))  # 32
    row_max = rows32.max(axis=(1, 2))  # 32
    mag_blocks = mag.reshape(8, 8, 8, 8).swapaxes(1, 2).reshape(64, 64)
    grad_grid = mag_blocks.mean(axis=1)  # 64

    desc = np.concatenate([grid_mean, grid_std, hog, row_mean, col_mean, row_min, row_max, grad_grid])
    assert desc.shape == (EMBED_DIM,)
    return desc.astype(np.float32)


_RESNET = None


def _pretrained_embed(images: list[np.ndarray]) -> np.ndarray:
    global _RESNET
    import torch

    if _RESNET is None:
        try:
            from torchvision.models import ResNet18_Weights, resnet18

            model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
        except Exception as e:  # weights not downloadable in hermetic setups
            raise BackendUnavailableError(f"pretrained backbone unavailable: {e}") from e
        model.fc = torch.nn.Identity()
        model.eval()
        _RESNET = model
    mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
    std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), 64):
            batch = []
            for img in images[start : start + 64]:
                f = np.asarray(
                    Image.fromarray(img, mode="L").resize((224, 224), Image.BILINEAR),
                    dtype=np.float32) / 255.0
                rgb = (np.repeat(f[None, :, :], 3, axis=0) - mean[:, None, None]) / std[:, None, None]
                batch.append(rgb)
            t = torch.from_numpy(np.stack(batch))
            out.append(_RESNET(t).numpy())
    return np.concatenate(out, axis=0)


def extract_embeddings(
    samples: list[ImageSample],
    manifest: Manifest,
    backend: str = "hermetic",
) -> FeatureMatrix:
    """Embed each sample's image as one 512-dim row, in sample order."""
    if backend not in ("hermetic", "pretrained_backbone"):
        raise FeatureError(f"unknown backend: {backend!r}")
    images = []
    for s in samples:
        try:
            images.append(manifest.load_image(s))
        except Exception as e:
            raise FeatureError(f"cannot decode image for sample {s.id!r}: {e}") from e
    if backend == "hermetic":
        values = np.stack([_hermetic_descriptor(img) for img in images]) if images else \
            np.zeros((0, EMBED_DIM), dtype=np.float32)
    else:
        values = _pretrained_embed(images).astype(np.float32) if images else \
            np.zeros((0, EMBED_DIM), dtype=np.float32)
    return FeatureMatrix(values=values, row_ids=tuple(s.id for s in samples))


def embed_images(images: list[np.ndarray], ids: list[str], backend: str = "hermetic") -> FeatureMatrix:
    """Embed in-memory uint8 images (used for GAN samples and FID)."""
    if backend == "hermetic":
        values = np.stack([_hermetic_descriptor(img) for img in images])
    elif backend == "pretrained_backbone":
        values = _pretrained_embed(images).astype(np.float32)
    else:
        raise FeatureError(f"unknown backend: {backend!r}")
    return FeatureMatrix(values=values.astype(np.float32), row_ids=tuple(ids))


# ---------------------------------------------------------------------------
# Mutual information and selection
# ---------------------------------------------------------------------------


def _equal_frequency_bins(column: np.ndarray, bins: int) -> np.ndarray:
    qs = np.quantile(column, [i / bins for i in range(1, bins)])
    return np.searchsorted(qs, column, side="left")


def mutual_information(column: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_MI_BINS) -> float:
    """Plug-in discrete MI (nats) between an equal-frequency binned column
    and the class labels."""
    column = np.asarray(column, dtype=np.float64)
    labels = np.asarray(labels)
    if column.shape[0] != labels.shape[0]:
        raise FeatureError("column and labels must have the same length")
    n = column.shape[0]
    if n < 2:
        raise FeatureError("need at least 2 samples")
    if bins < 2:
        raise FeatureError("bins must be >= 2")
    b = _equal_frequency_bins(column, bins)
    _, bi = np.unique(b, return_inverse=True)
    _, yi = np.unique(labels, return_inverse=True)
    joint = np.zeros((bi.max() + 1, yi.max() + 1))
    np.add.at(joint, (bi, yi), 1.0)
    p = joint / n
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / (px * py)), 0.0)
    return float(max(terms.sum(), 0.0))


def select_top_k(matrix: FeatureMatrix, labels: np.ndarray, bins: int = DEFAULT_MI_BINS) -> SelectionMask:
    """Keep the floor(sqrt(N)) columns with the highest MI; ties to lower index."""
    if matrix.n == 0:
        raise FeatureError("cannot select features from an empty matrix")
    k = max(1, min(math.isqrt(matrix.n), matrix.d))
    scores = np.array(
        [mutual_information(matrix.values[:, j], labels, bins) for j in range(matrix.d)]
    )
    order = np.lexsort((np.arange(matrix.d), -scores))
    selected = tuple(sorted(int(j) for j in order[:k]))
    return SelectionMask(selected_columns=selected, k=k, mi_scores=scores)


def apply_mask(matrix: FeatureMatrix, mask: SelectionMask) -> FeatureMatrix:
    for j in mask.selected_columns:
        if not (0 <= j < matrix.d):
            raise FeatureError(f"mask column {j} out of range for width {matrix.d}")
    return FeatureMatrix(
        values=matrix.values[:, list(mask.selected_columns)],
        row_ids=matrix.row_ids,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_feature_matrix(matrix: FeatureMatrix, path: Path) -> None:
    """Binary container: magic, n and d as u64 LE, float32 rows, then ids."""
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC)
        fh.write(struct.pack("<QQ", matrix.n, matrix.d))
        fh.write(np.ascontiguousarray(matrix.values, dtype=np.float32).tobytes())
        fh.write("\n".join(matrix.row_ids).encode("utf-8"))


def load_feature_matrix(path: Path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:5] != FMAT_MAGIC:
        raise FeatureError(f"bad magic in {path}")
    n, d = struct.unpack("<QQ", data[5:21])
    body = 21 + n * d * 4
    values = np.frombuffer(data[21:body], dtype="<f4").reshape(n, d).copy()
    ids = data[body:].decode("utf-8").split("\n") if n else []
    return FeatureMatrix(values=values, row_ids=tuple(ids))


def export_feature_csv(matrix: FeatureMatrix, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"f{j}" for j in range(matrix.d)) + "\n")
        for rid, row in zip(matrix.row_ids, matrix.values):
            fh.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")
