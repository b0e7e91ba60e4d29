"""Synthetic three-class logo-print corpus.

Generates grayscale images of a fixed vector wordmark printed on a textured
background, with two defect modes: a second offset semi-transparent print
("double print") and erased horizontal bands ("interrupted print"). Every
sample is a pure function of (spec.seed, class, index), so corpora are
bit-reproducible and individual samples can be re-rendered from their stored
generation parameters.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .seeds import rng_for

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

BG_LEVEL = 0.78
INK_LEVEL = 0.18


class CorpusError(Exception):
    pass


class LabelClass(str, Enum):
    GOOD = "good"
    DOUBLE_PRINT = "double_print"
    INTERRUPTED_PRINT = "interrupted_print"

    @property
    def is_defective(self) -> bool:
        return self is not LabelClass.GOOD


class Provenance(str, Enum):
    REAL = "real"
    GAN_SYNTHETIC = "gan_synthetic"


@dataclass(frozen=True)
class DefectParams:
    """Ranges the per-sample defect parameters are drawn from."""

    double_print_offset: tuple[float, float] = (2.0, 6.0)  # pixels
    double_print_opacity: tuple[float, float] = (0.5, 0.9)
    interrupt_band_count: tuple[int, int] = (2, 4)
    interrupt_band_width: tuple[float, float] = (3.0, 7.0)  # pixels


@dataclass(frozen=True)
class NoiseParams:
    rotation_jitter: float = 3.0  # degrees, +/-
    translation_jitter: float = 1.5  # pixels, +/-
    background_texture_amplitude: float = 0.04
    lighting_gradient_amplitude: float = 0.05


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict[LabelClass, int]
    image_size: int = 64
    defect_params: DefectParams = field(default_factory=DefectParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise CorpusError(f"image_size too small: {self.image_size}")
        if any(n < 0 for n in self.counts.values()):
            raise CorpusError("negative class count")
        if sum(self.counts.values()) < 1:
            raise CorpusError("counts must sum to at least 1")
        d = self.defect_params
        for name, (lo, hi) in [
            ("double_print_offset", d.double_print_offset),
            ("double_print_opacity", d.double_print_opacity),
            ("interrupt_band_count", d.interrupt_band_count),
            ("interrupt_band_width", d.interrupt_band_width),
        ]:
            if lo > hi:
                raise CorpusError(f"empty range for {name}: ({lo}, {hi})")
        lo, hi = d.double_print_opacity
        if lo < 0.0 or hi > 1.0:
            raise CorpusError("double_print_opacity must lie within [0, 1]")
        if d.interrupt_band_count[0] < 0:
            raise CorpusError("interrupt_band_count must be non-negative")

    def to_dict(self) -> dict:
        return {
            "counts": {c.value: int(n) for c, n in self.counts.items()},
            "image_size": self.image_size,
            "defect_params": dataclasses.asdict(self.defect_params),
            "noise": dataclasses.asdict(self.noise),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "CorpusSpec":
        def pair(v):
            return tuple(v)

        dp = d["defect_params"]
        return CorpusSpec(
            counts={LabelClass(c): int(n) for c, n in d["counts"].items()},
            image_size=int(d["image_size"]),
            defect_params=DefectParams(
                double_print_offset=pair(dp["double_print_offset"]),
                double_print_opacity=pair(dp["double_print_opacity"]),
                interrupt_band_count=pair(dp["interrupt_band_count"]),
                interrupt_band_width=pair(dp["interrupt_band_width"]),
            ),
            noise=NoiseParams(**d["noise"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ImageSample:
    id: str
    path: str  # relative to the manifest's directory
    label: LabelClass
    provenance: Provenance
    gen_params: dict

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "label": self.label.value,
            "provenance": self.provenance.value,
            "gen_params": self.gen_params,
        }

    @staticmethod
    def from_dict(d: dict) -> "ImageSample":
        return ImageSample(
            id=d["id"],
            path=d["path"],
            label=LabelClass(d["label"]),
            provenance=Provenance(d["provenance"]),
            gen_params=d["gen_params"],
        )


@dataclass(frozen=True)
class Manifest:
    corpus_spec: CorpusSpec
    samples: tuple[ImageSample, ...]
    root: Path  # directory the sample paths are relative to
    format_version: int = MANIFEST_VERSION

    def class_counts(self) -> dict[LabelClass, int]:
        counts = {c: 0 for c in LabelClass}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def image_path(self, sample: ImageSample) -> Path:
        return self.root / sample.path

    def load_image(self, sample: ImageSample) -> np.ndarray:
        """Decode a sample as a uint8 grayscale array."""
        path = self.image_path(sample)
        if not path.exists():
            raise CorpusError(f"image missing for sample {sample.id!r}: {path}")
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

# Wordmark glyph in normalized [0,1]^2 coordinates: a stylized three-letter
# mark (bar, ring, angled stroke) plus an underline, giving the print both
# vertical and horizontal structure.
_GLYPH_RECTS = [
    (0.12, 0.34, 0.20, 0.66),  # vertical bar "I"
    (0.10, 0.72, 0.90, 0.78),  # underline
]
_GLYPH_RINGS = [
    (0.42, 0.50, 0.145, 0.075),  # "O": cx, cy, r_out, r_in
]
_GLYPH_STROKES = [
    (0.64, 0.66, 0.80, 0.34, 0.045),  # "/": x0, y0, x1, y1, half-width
    (0.80, 0.66, 0.88, 0.66, 0.030),  # foot serif
]

_SUPERSAMPLE = 2


def _glyph_coverage(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean coverage of the wordmark at the given normalized coords."""
    cov = np.zeros(xs.shape, dtype=bool)
    for x0, y0, x1, y1 in _GLYPH_RECTS:
        cov |= (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    for cx, cy, r_out, r_in in _GLYPH_RINGS:
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        cov |= (d2 <= r_out**2) & (d2 >= r_in**2)
    for x0, y0, x1, y1, hw in _GLYPH_STROKES:
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / L2, 0.0, 1.0)
        d2 = (xs - (x0 + t * dx)) ** 2 + (ys - (y0 + t * dy)) ** 2
        cov |= d2 <= hw * hw
    return cov


def _render_ink_mask(size: int, rotation_deg: float, tx: float, ty: float) -> np.ndarray:
    """Antialiased glyph mask in [0,1], jittered by rotation and translation."""
    n = size * _SUPERSAMPLE
    px = (np.arange(n) + 0.5) / _SUPERSAMPLE  # pixel coords
    gx, gy = np.meshgrid(px, px)
    # inverse transform: un-translate, un-rotate about the image center
    cx = cy = size / 2.0
    a = math.radians(rotation_deg)
    ca, sa = math.cos(a), math.sin(a)
    ux = gx - cx - tx
    uy = gy - cy - ty
    rx = ca * ux + sa * uy + cx
    ry = -sa * ux + ca * uy + cy
    cov = _glyph_coverage(rx / size, ry / size).astype(np.float64)
    s = _SUPERSAMPLE
    return cov.reshape(size, s, size, s).mean(axis=(1, 3))


def _background(size: int, params: dict) -> np.ndarray:
    px = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(px, px)
    bg = np.full((size, size), BG_LEVEL)
    for freq, angle, phase, amp in params["texture"]:
        u = math.cos(angle) * gx + math.sin(angle) * gy
        bg += amp * np.sin(2.0 * math.pi * freq * u + phase)
    la = params["light_angle"]
    bg += params["light_amp"] * 2.0 * (math.cos(la) * (gx - 0.5) + math.sin(la) * (gy - 0.5))
    return bg


def _band_keep(size: int, bands: list) -> np.ndarray:
    """Per-row keep factor in [0,1]; 0 inside a band, 1px soft edges."""
    y = np.arange(size) + 0.5
    keep = np.ones(size)
    for center, width in bands:
        half = width / 2.0
        inside = np.clip(half + 1.0 - np.abs(y - center), 0.0, 1.0)
        keep *= 1.0 - np.minimum(inside, 1.0)
    return keep


def draw_gen_params(spec: CorpusSpec, label: LabelClass, rng: np.random.Generator) -> dict:
    """Draw the per-sample parameters the renderer consumes."""
    nz = spec.noise
    params = {
        "rotation_deg": float(rng.uniform(-nz.rotation_jitter, nz.rotation_jitter)),
        "tx": float(rng.uniform(-nz.translation_jitter, nz.translation_jitter)),
        "ty": float(rng.uniform(-nz.translation_jitter, nz.translation_jitter)),
        "texture": [
            [2.3, float(rng.uniform(0, math.pi)), float(rng.uniform(0, 2 * math.pi)),
             spec.noise.background_texture_amplitude],
            [4.7, float(rng.uniform(0, math.pi)), float(rng.uniform(0, 2 * math.pi)),
             spec.noise.background_texture_amplitude * 0.5],
        ],
        "light_angle": float(rng.uniform(0, 2 * math.pi)),
        "light_amp": spec.noise.lighting_gradient_amplitude,
    }
    d = spec.defect_params
    if label is LabelClass.DOUBLE_PRINT:
        offset = float(rng.uniform(*d.double_print_offset))
        angle = float(rng.uniform(0, 2 * math.pi))
        params["offset_dx"] = offset * math.cos(angle)
        params["offset_dy"] = offset * math.sin(angle)
        params["opacity"] = float(rng.uniform(*d.double_print_opacity))
    elif label is LabelClass.INTERRUPTED_PRINT:
        lo, hi = d.interrupt_band_count
        n_bands = int(rng.integers(lo, hi + 1))
        size = spec.image_size
        bands = []
        for _ in range(n_bands):
            center = float(rng.uniform(0.30 * size, 0.82 * size))
            width = float(rng.uniform(*d.interrupt_band_width))
            bands.append([center, width])
        params["bands"] = bands
    return params


def render_sample(spec: CorpusSpec, label: LabelClass, params: dict) -> np.ndarray:
    """Render one uint8 grayscale image from drawn parameters."""
    size = spec.image_size
    mask = _render_ink_mask(size, params["rotation_deg"], params["tx"], params["ty"])
    if label is LabelClass.DOUBLE_PRINT:
        ghost = _render_ink_mask(
            size,
            params["rotation_deg"],
            params["tx"] + params["offset_dx"],
            params["ty"] + params["offset_dy"],
        )
        mask = np.maximum(mask, params["opacity"] * ghost)
    elif label is LabelClass.INTERRUPTED_PRINT:
        mask = mask * _band_keep(size, params["bands"])[:, None]
    img = _background(size, params) * (1.0 - mask) + INK_LEVEL * mask
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Image-space corruption (reused by the unsupervised detector's training)
# ---------------------------------------------------------------------------


def _estimate_ink(img: np.ndarray) -> np.ndarray:
    """Approximate ink coverage of an arbitrary print image, in [0,1]."""
    f = img.astype(np.float64) / 255.0
    bg = np.percentile(f, 85)
    fg = np.percentile(f, 2)
    return np.clip((bg - f) / max(bg - fg, 1e-6), 0.0, 1.0)


def _shift2d(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    ys0, ys1 = max(dy, 0), min(h + dy, h)
    xs0, xs1 = max(dx, 0), min(w + dx, w)
    out[ys0:ys1, xs0:xs1] = a[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return out


def simulate_double_print(img: np.ndarray, dx: float, dy: float, opacity: float):
    """Overlay an offset semi-transparent ghost of the image's own print.

    Returns (corrupted uint8 image, float defect mask in [0,1]).
    """
    ink = _estimate_ink(img)
    ghost = opacity * _shift2d(ink, int(round(dy)), int(round(dx)))
    f = img.astype(np.float64) / 255.0
    out = f * (1.0 - ghost) + INK_LEVEL * ghost
    corrupted = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    mask = np.clip(ghost * (1.0 - ink), 0.0, 1.0)
    return corrupted, mask


def simulate_interrupted_print(img: np.ndarray, bands: list):
    """Erase horizontal bands of the print, filling with local background.

    Returns (corrupted uint8 image, float defect mask in [0,1]).
    """
    ink = _estimate_ink(img)
    f = img.astype(np.float64) / 255.0
    bg = np.percentile(f, 85)
    erase = (1.0 - _band_keep(img.shape[0], bands))[:, None] * ink
    out = f * (1.0 - erase) + bg * erase
    corrupted = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    return corrupted, erase


def draw_corruption(img: np.ndarray, defect_params: DefectParams, rng: np.random.Generator):
    """Apply a random defect-renderer corruption to a clean image."""
    size = img.shape[0]
    if rng.random() < 0.5:
        offset = rng.uniform(*defect_params.double_print_offset)
        angle = rng.uniform(0, 2 * math.pi)
        opacity = rng.uniform(*defect_params.double_print_opacity)
        return simulate_double_print(img, offset * math.cos(angle), offset * math.sin(angle), opacity)
    lo, hi = defect_params.interrupt_band_count
    n_bands = int(rng.integers(max(lo, 1), hi + 1))
    bands = [
        [float(rng.uniform(0.30 * size, 0.82 * size)), float(rng.uniform(*defect_params.interrupt_band_width))]
        for _ in range(n_bands)
    ]
    return simulate_interrupted_print(img, bands)


# ---------------------------------------------------------------------------
# Corpus generation and manifest I/O
# ---------------------------------------------------------------------------


def generate_corpus(spec: CorpusSpec, out_dir: Path) -> Manifest:
    """Render the full corpus into out_dir and write its manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create output directory {out_dir}: {e}") from e
    if not out_dir.is_dir():
        raise CorpusError(f"not a directory: {out_dir}")

    samples = []
    for label in LabelClass:
        n = spec.counts.get(label, 0)
        class_dir = out_dir / "images" / label.value
        if n > 0:
            class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rng = rng_for(spec.seed, "sample", label.value, i)
            params = draw_gen_params(spec, label, rng)
            img = render_sample(spec, label, params)
            sample_id = f"{label.value}-{i:05d}"
            rel = f"images/{label.value}/{sample_id}.png"
            Image.fromarray(img, mode="L").save(out_dir / rel)
            samples.append(
                ImageSample(
                    id=sample_id,
                    path=rel,
                    label=label,
                    provenance=Provenance.REAL,
                    gen_params=params,
                )
            )
    manifest = Manifest(corpus_spec=spec, samples=tuple(samples), root=out_dir)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def save_manifest(manifest: Manifest, path: Path) -> None:
    doc = {
        "format_version": manifest.format_version,
        "corpus_spec": manifest.corpus_spec.to_dict(),
        "samples": [s.to_dict() for s in manifest.samples],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path: Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise CorpusError(f"unsupported manifest format_version: {version!r} (expected {MANIFEST_VERSION})")
    root = path.parent
    samples = tuple(ImageSample.from_dict(d) for d in doc["samples"])
    seen = set()
    for s in samples:
        if s.id in seen:
            raise CorpusError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        if not (root / s.path).exists():
            raise CorpusError(f"image missing for sample {s.id!r}: {s.path}")
    return Manifest(
        corpus_spec=CorpusSpec.from_dict(doc["corpus_spec"]),
        samples=samples,
        root=root,
        format_version=version,
    )


def subsample_defective(manifest: Manifest, retention: float, seed: int) -> Manifest:
    """Keep ceil(retention * n_c) samples of each defective class; Good untouched."""
    if not (0.0 < retention <= 1.0):
        raise CorpusError(f"retention must be in (0, 1]: {retention}")
    keep_ids = set()
    for label in LabelClass:
        idx = [s.id for s in manifest.samples if s.label is label]
        if not label.is_defective or retention == 1.0:
            keep_ids.update(idx)
            continue
        if not idx:
            continue
        n_keep = math.ceil(retention * len(idx))
        rng = rng_for(seed, "retention", label.value)
        chosen = rng.choice(len(idx), size=n_keep, replace=False)
        keep_ids.update(idx[i] for i in chosen)
    kept = tuple(s for s in manifest.samples if s.id in keep_ids)
    return dataclasses.replace(manifest, samples=kept)
