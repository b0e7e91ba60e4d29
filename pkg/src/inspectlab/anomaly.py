"""Unsupervised defect detection in the reconstruct-then-discriminate style.

An encoder-decoder is trained to map procedurally corrupted Good images back
to their clean appearance; a small convolutional head turns (input,
reconstruction) pairs into a per-pixel anomaly map, supervised by the known
corruption mask. Only Good-labeled images are ever seen during training.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DefectParams, LabelClass, draw_corruption
from .metrics import auc_binary
from .seeds import derive_seed, rng_for

MODEL_MAGIC = b"ANOM1"


class AnomalyError(Exception):
    pass


class LabelGuardError(AnomalyError):
    """A defective-labeled image reached the unsupervised trainer."""


@dataclass(frozen=True)
class AnomalyConfig:
    image_size: int = 64
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    corruption_prob: float = 0.5
    defect_params: DefectParams = field(default_factory=DefectParams)
    score_mode: str = "top1pct"  # or "max"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "AnomalyConfig":
        d = dict(d)
        dp = d.pop("defect_params")
        return AnomalyConfig(defect_params=DefectParams(**{k: tuple(v) for k, v in dp.items()}), **d)


class _Reconstructor(nn.Module):
    """4-level encoder-decoder, small enough for CPU training."""

    def __init__(self):
        super().__init__()
        ch = [1, 16, 32, 64, 64]
        self.downs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1), nn.LeakyReLU(0.1, inplace=True))
            for i in range(4)
        )
        self.ups = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch[4 - i], ch[3 - i] if i < 3 else 16, 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
            )
            for i in range(4)
        )
        self.out = nn.Conv2d(16, 1, 3, padding=1)

    def forward(self, x):
        for d in self.downs:
            x = d(x)
        for u in self.ups:
            x = u(x)
        return torch.tanh(self.out(x))


class _Head(nn.Module):
    """Discriminative head on concatenated (input, reconstruction)."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(2, 16, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(16, 16, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(16, 1, 3, padding=1),
        )

    def forward(self, x, recon):
        return self.net(torch.cat([x, recon], dim=1))


@dataclass
class AnomalyModel:
    config: AnomalyConfig
    weights: bytes  # serialized (reconstructor, head) state dicts
    epoch_losses: list  # mean reconstruction loss per epoch

    def networks(self) -> tuple[_Reconstructor, _Head]:
        state = torch.load(io.BytesIO(self.weights), weights_only=True)
        rec, head = _Reconstructor(), _Head()
        rec.load_state_dict(state["reconstructor"])
        head.load_state_dict(state["head"])
        rec.eval()
        head.eval()
        return rec, head


@dataclass(frozen=True)
class AnomalyResult:
    score: float
    map: np.ndarray


def _to_unit(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def train_unsupervised(images: list[np.ndarray], config: AnomalyConfig,
                       labels=None) -> AnomalyModel:
    """Train on Good images plus procedurally corrupted copies of them."""
    if labels is not None:
        bad = [str(l) for l in labels if LabelClass(l) is not LabelClass.GOOD]
        if bad:
            raise LabelGuardError(
                f"unsupervised training accepts Good images only; got {len(bad)} defective labels")
    if len(images) < 50:
        raise AnomalyError(f"need at least 50 Good images, got {len(images)}")
    size = images[0].shape[0]
    for img in images:
        if img.shape != (size, size):
            raise AnomalyError("images must share one square size")

    torch.manual_seed(derive_seed(config.seed, "anomaly-init"))
    rec, head = _Reconstructor(), _Head()
    opt = torch.optim.Adam(list(rec.parameters()) + list(head.parameters()),
                           lr=config.learning_rate)
    rng = rng_for(config.seed, "anomaly-batches")

    clean = np.stack([_to_unit(i) for i in images])
    epoch_losses = []
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        recon_losses = []
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            xs, targets, masks = [], [], []
            for bi in batch_idx:
                if rng.random() < config.corruption_prob:
                    corrupted, mask = draw_corruption(images[bi], config.defect_params, rng)
                    xs.append(_to_unit(corrupted))
                    masks.append((mask > 0.05).astype(np.float32))
                else:
                    xs.append(clean[bi])
                    masks.append(np.zeros((size, size), dtype=np.float32))
                targets.append(clean[bi])
            x = torch.from_numpy(np.stack(xs)).unsqueeze(1)
            t = torch.from_numpy(np.stack(targets)).unsqueeze(1)
            m = torch.from_numpy(np.stack(masks)).unsqueeze(1)
            recon = rec(x)
            loss_rec = F.mse_loss(recon, t)
            loss_seg = F.binary_cross_entropy_with_logits(head(x, recon), m)
            loss = loss_rec + loss_seg
            if not torch.isfinite(loss):
                raise AnomalyError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            recon_losses.append(float(loss_rec.detach()))
        epoch_losses.append(float(np.mean(recon_losses)))

    buf = io.BytesIO()
    torch.save({"reconstructor": rec.state_dict(), "head": head.state_dict()}, buf)
    return AnomalyModel(config=config, weights=buf.getvalue(), epoch_losses=epoch_losses)


def score(model: AnomalyModel, image: np.ndarray,
          _nets: tuple | None = None) -> AnomalyResult:
    """Anomaly map plus scalar score (mean of the top-1% map pixels)."""
    if image.shape != (model.config.image_size, model.config.image_size):
        raise AnomalyError(
            f"image shape {image.shape} does not match trained size {model.config.image_size}")
    rec, head = _nets if _nets is not None else model.networks()
    x = torch.from_numpy(_to_unit(image)).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        recon = rec(x)
        amap = torch.sigmoid(head(x, recon))[0, 0].numpy()
    if amap.shape != image.shape:
        raise AnomalyError(f"map shape {amap.shape} does not match image {image.shape}")
    flat = np.sort(amap, axis=None)
    if model.config.score_mode == "max":
        s = float(flat[-1])
    else:
        top = max(1, int(round(0.01 * flat.size)))
        s = float(flat[-top:].mean())
    return AnomalyResult(score=s, map=amap)


def score_many(model: AnomalyModel, images: list[np.ndarray]) -> np.ndarray:
    nets = model.networks()
    return np.array([score(model, img, _nets=nets).score for img in images])


def evaluate_anomaly_auc(model: AnomalyModel, images: list[np.ndarray], labels) -> float:
    """Binary AUC with defective as the positive class."""
    positives = np.array([LabelClass(l).is_defective for l in labels])
    if positives.all() or not positives.any():
        raise AnomalyError("test set must contain both Good and defective samples")
    return auc_binary(score_many(model, images), positives)


def save_model(model: AnomalyModel, path: Path) -> None:
    header = json.dumps({"config": model.config.to_dict(),
                         "epoch_losses": model.epoch_losses}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(model.weights)


def load_model(path: Path) -> AnomalyModel:
    data = Path(path).read_bytes()
    if data[:5] != MODEL_MAGIC:
        raise AnomalyError(f"bad model magic in {path}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    return AnomalyModel(config=AnomalyConfig.from_dict(header["config"]),
                        weights=data[9 + hlen :],
                        epoch_losses=header["epoch_losses"])
