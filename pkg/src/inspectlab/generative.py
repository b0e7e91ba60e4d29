"""Per-class image generators and synthetic-image fidelity scoring.

The generator follows the lightweight few-shot GAN recipe at desk scale:
skip-layer channel excitation in the generator, hinge adversarial losses,
and a discriminator with an auxiliary self-supervised reconstruction head.
Fidelity is the Frechet distance between Gaussian fits of real and synthetic
feature distributions, computed with the same embedding backend the
classification pipeline uses.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .corpus import ImageSample, LabelClass, Manifest, Provenance
from .features import FeatureMatrix, embed_images
from .seeds import derive_seed, rng_for

CHECKPOINT_MAGIC = b"LGAN1"


class GenerativeError(Exception):
    pass


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FidReport:
    value: float
    n_real: int
    n_synth: int
    embedding_backend: str
    per_class: dict = field(default_factory=dict)


def fid_from_moments(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), via eigendecomposition
    of the symmetrized product with negative eigenvalues clipped at zero."""
    diff = float(((mu1 - mu2) ** 2).sum())
    w1, v1 = np.linalg.eigh((sigma1 + sigma1.T) / 2.0)
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = root1 @ sigma2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    return diff + float(np.trace(sigma1) + np.trace(sigma2)) - 2.0 * tr_sqrt


def compute_fid(real_features, synth_features, embedding_backend: str = "hermetic",
                eps: float = 1e-6) -> FidReport:
    """FID between two feature sets, with a +eps*I covariance ridge."""
    real = real_features.values if isinstance(real_features, FeatureMatrix) else np.asarray(real_features)
    synth = synth_features.values if isinstance(synth_features, FeatureMatrix) else np.asarray(synth_features)
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim != 2 or synth.ndim != 2 or real.shape[1] != synth.shape[1]:
        raise GenerativeError(f"dimension mismatch: {real.shape} vs {synth.shape}")
    if real.shape[0] < 2 or synth.shape[0] < 2:
        raise GenerativeError("need at least 2 rows per side")
    d = real.shape[1]
    mu1, mu2 = real.mean(axis=0), synth.mean(axis=0)
    s1 = np.cov(real, rowvar=False) + eps * np.eye(d)
    s2 = np.cov(synth, rowvar=False) + eps * np.eye(d)
    value = fid_from_moments(mu1, s1, mu2, s2)
    return FidReport(value=value, n_real=real.shape[0], n_synth=synth.shape[0],
                     embedding_backend=embedding_backend)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GanConfig:
    label: LabelClass
    image_size: int = 64
    latent_dim: int = 128
    iterations: int = 2000  # desk-scale default; 20000 for the full preset
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    fid_interval: int | None = None  # default: iterations // 4
    fid_sample_count: int = 64

    def validate(self) -> None:
        if self.image_size not in (32, 64, 128):
            raise GenerativeError(f"image_size must be one of 32/64/128: {self.image_size}")
        if self.iterations < 1:
            raise GenerativeError("iterations must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "GanConfig":
        known = {f for f in GanConfig.__dataclass_fields__}
        d = {k: v for k, v in d.items() if k in known}  # skip unknown fields
        d["label"] = LabelClass(d["label"])
        return GanConfig(**d)


class _SkipLayerExcitation(nn.Module):
    """Channel gate on a high-res map computed from a low-res map."""

    def __init__(self, low_ch: int, high_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.AdaptiveAvgPool2d(4),
            nn.Conv2d(low_ch, high_ch, 4, bias=True),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(high_ch, high_ch, 1, bias=True),
            nn.Sigmoid(),
        )

    def forward(self, high, low):
        return high * self.net(low)


def _up_block(in_ch: int, out_ch: int) -> nn.Module:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(0.1, inplace=True),
    )


class Generator(nn.Module):
    def __init__(self, image_size: int, latent_dim: int):
        super().__init__()
        self.image_size = image_size
        chans = {32: [128, 64, 32, 16], 64: [128, 64, 32, 16, 16], 128: [128, 64, 32, 16, 16, 8]}[image_size]
        self.stem = nn.Sequential(
            nn.Linear(latent_dim, 4 * 4 * chans[0]),
            nn.LeakyReLU(0.1, inplace=True),
        )
        self.c0 = chans[0]
        self.blocks = nn.ModuleList(
            [_up_block(chans[i], chans[i + 1]) for i in range(len(chans) - 1)]
        )
        # excite the final map from the first (8x8) block's output
        self.sle = _SkipLayerExcitation(chans[1], chans[-1])
        self.to_img = nn.Conv2d(chans[-1], 1, 3, padding=1)

    def forward(self, z):
        x = self.stem(z).view(-1, self.c0, 4, 4)
        low = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 0:
                low = x
        x = self.sle(x, low)
        return torch.tanh(self.to_img(x))


def _down_block(in_ch: int, out_ch: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.LeakyReLU(0.1, inplace=True),
    )


class Discriminator(nn.Module):
    def __init__(self, image_size: int):
        super().__init__()
        n_down = int(math.log2(image_size // 4))
        chans = [1] + [min(16 * 2**i, 128) for i in range(n_down)]
        self.downs = nn.ModuleList(_down_block(chans[i], chans[i + 1]) for i in range(n_down))
        self.logit = nn.Conv2d(chans[-1], 1, 4)
        # auxiliary self-supervised head: reconstruct a downsampled input
        self.decoder = nn.Sequential(
            _up_block(chans[-1], 32),
            _up_block(32, 16),
            nn.Conv2d(16, 1, 3, padding=1),
            nn.Tanh(),
        )

    def forward(self, x):
        feats = x
        for down in self.downs:
            feats = down(feats)
        return self.logit(feats).view(-1), self.decoder(feats)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GeneratorCheckpoint:
    config: GanConfig
    iteration: int
    weights: bytes  # serialized generator state_dict
    fid_history: list  # [(iteration, fid), ...]


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).unsqueeze(1)


def _to_uint8(batch: torch.Tensor) -> list[np.ndarray]:
    arr = ((batch.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    return [a[0] for a in arr]


def _generator_fid(gen: Generator, config: GanConfig, real_images: list[np.ndarray]) -> float:
    n = min(config.fid_sample_count, len(real_images))
    fake = sample_images(gen, config, n, seed=derive_seed(config.seed, "fid-eval"))
    real_fm = embed_images(real_images[:n], [f"r{i}" for i in range(n)])
    fake_fm = embed_images(fake, [f"s{i}" for i in range(n)])
    return compute_fid(real_fm, fake_fm).value


def train_gan(images: list[np.ndarray], config: GanConfig,
              resume: "GeneratorCheckpoint | None" = None) -> GeneratorCheckpoint:
    """Adversarially train a per-class generator on one class's images.

    With `resume`, weights are restored from the checkpoint and the
    iteration counter continues from its recorded value up to
    config.iterations (optimizer moments restart).
    """
    config.validate()
    if len(images) < 20:
        raise GenerativeError(f"need at least 20 training images, got {len(images)}")
    for img in images:
        if img.shape != (config.image_size, config.image_size):
            raise GenerativeError(
                f"image shape {img.shape} does not match configured size {config.image_size}")

    torch.manual_seed(derive_seed(config.seed, "gan-init"))
    gen = Generator(config.image_size, config.latent_dim)
    disc = Discriminator(config.image_size)
    start_it = 0
    fid_history = []
    if resume is not None:
        state = torch.load(io.BytesIO(resume.weights), weights_only=True)
        gen.load_state_dict(state["generator"])
        if "discriminator" in state:
            disc.load_state_dict(state["discriminator"])
        start_it = resume.iteration
        fid_history = list(resume.fid_history)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    rng = rng_for(config.seed, "gan-batches")
    data = _to_tensor(images)
    recon_size = data.shape[-1] // 4

    fid_interval = config.fid_interval or max(1, config.iterations // 4)
    if not fid_history:
        fid_history = [(0, _generator_fid(gen, config, images))]

    g_gen = torch.Generator().manual_seed(derive_seed(config.seed, "gan-latents") % (2**63))
    last_good = None
    for it in range(start_it + 1, config.iterations + 1):
        idx = rng.integers(0, len(images), size=config.batch_size)
        real = data[idx]
        z = torch.randn(config.batch_size, config.latent_dim, generator=g_gen)

        # discriminator: hinge loss + reconstruction of downsampled real
        with torch.no_grad():
            fake = gen(z)
        logit_real, recon = disc(real)
        logit_fake, _ = disc(fake)
        target = F.interpolate(real, size=recon_size, mode="bilinear", align_corners=False)
        recon = F.interpolate(recon, size=recon_size, mode="bilinear", align_corners=False)
        loss_d = (F.relu(1.0 - logit_real).mean() + F.relu(1.0 + logit_fake).mean()
                  + F.mse_loss(recon, target))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        # generator: fool the discriminator
        z = torch.randn(config.batch_size, config.latent_dim, generator=g_gen)
        logit_fake, _ = disc(gen(z))
        loss_g = -logit_fake.mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            if last_good is not None:
                return last_good
            raise GenerativeError(f"non-finite loss at iteration {it} (d={loss_d}, g={loss_g})")

        if it % fid_interval == 0 or it == config.iterations:
            fid_history.append((it, _generator_fid(gen, config, images)))
            last_good = _make_checkpoint(gen, disc, config, it, list(fid_history))

    if last_good is None:  # resume already at or past the configured budget
        last_good = _make_checkpoint(gen, disc, config, max(start_it, config.iterations),
                                     list(fid_history))
    return last_good


def _make_checkpoint(gen: Generator, disc: Discriminator, config: GanConfig,
                     iteration: int, fid_history: list) -> GeneratorCheckpoint:
    buf = io.BytesIO()
    torch.save({"generator": gen.state_dict(), "discriminator": disc.state_dict()}, buf)
    return GeneratorCheckpoint(config=config, iteration=iteration,
                               weights=buf.getvalue(), fid_history=fid_history)


def _load_generator(checkpoint: GeneratorCheckpoint) -> Generator:
    gen = Generator(checkpoint.config.image_size, checkpoint.config.latent_dim)
    state = torch.load(io.BytesIO(checkpoint.weights), weights_only=True)
    gen.load_state_dict(state["generator"] if "generator" in state else state)
    gen.eval()
    return gen


def sample_images(gen_or_ckpt, config: GanConfig | None, n: int, seed: int) -> list[np.ndarray]:
    """Draw n uint8 images; deterministic given seed."""
    if n < 1:
        raise GenerativeError("n must be >= 1")
    if isinstance(gen_or_ckpt, GeneratorCheckpoint):
        config = gen_or_ckpt.config
        gen = _load_generator(gen_or_ckpt)
    else:
        gen = gen_or_ckpt
    was_training = gen.training
    gen.eval()
    g = torch.Generator().manual_seed(seed % (2**63))
    out = []
    with torch.no_grad():
        for start in range(0, n, 64):
            b = min(64, n - start)
            z = torch.randn(b, config.latent_dim, generator=g)
            out.extend(_to_uint8(gen(z)))
    if was_training:
        gen.train()
    return out


def sample(checkpoint: GeneratorCheckpoint, n: int, seed: int) -> list[np.ndarray]:
    return sample_images(checkpoint, None, n, seed)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(checkpoint: GeneratorCheckpoint, path: Path) -> None:
    header = json.dumps({
        "config": checkpoint.config.to_dict(),
        "iteration": checkpoint.iteration,
        "fid_history": checkpoint.fid_history,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(checkpoint.weights)


def load_checkpoint(path: Path) -> GeneratorCheckpoint:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise GenerativeError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    return GeneratorCheckpoint(
        config=GanConfig.from_dict(header["config"]),
        iteration=int(header["iteration"]),
        weights=data[9 + hlen :],
        fid_history=[tuple(x) for x in header["fid_history"]],
    )


# ---------------------------------------------------------------------------
# Manifest-level oversampling
# ---------------------------------------------------------------------------


def gan_oversample(manifest: Manifest, checkpoints: dict[LabelClass, GeneratorCheckpoint],
                   seed: int, work_dir: Path) -> Manifest:
    """Append GAN samples until all class counts reach the majority count."""
    import dataclasses

    counts = {c: n for c, n in manifest.class_counts().items() if n > 0}
    majority = max(counts.values())
    work_dir = Path(work_dir)
    new_samples = list(manifest.samples)
    for label in LabelClass:
        need = majority - counts.get(label, majority)
        if need <= 0:
            continue
        if label not in checkpoints:
            raise GenerativeError(f"no generator checkpoint for class {label.value}")
        class_seed = derive_seed(seed, "gan-oversample", label.value)
        imgs = sample(checkpoints[label], need, class_seed)
        out_dir = work_dir / "synthetic" / label.value
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            name = f"{class_seed % 10**8}_{i:05d}.png"
            Image.fromarray(img, mode="L").save(out_dir / name)
            rel = os.path.relpath(out_dir / name, manifest.root)
            new_samples.append(ImageSample(
                id=f"synthetic-{label.value}-{i:05d}",
                path=rel,
                label=label,
                provenance=Provenance.GAN_SYNTHETIC,
                gen_params={"checkpoint_iteration": checkpoints[label].iteration,
                            "sample_seed": class_seed, "index": i},
            ))
    return dataclasses.replace(manifest, samples=tuple(new_samples))
