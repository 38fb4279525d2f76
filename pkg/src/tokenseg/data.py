"""Synthetic shape data with exact ground truth, plus folder-dataset ingestion.

Every sample is one shape (ellipse, rectangle, or harmonic blob) rasterized on
the same half-pixel-center grid the geometry extractor uses, so descriptors
are exact by construction. A style recipe renders the image around the fixed
mask: the shape parameters are drawn before any style-dependent randomness, so
the same seed produces the same mask under every style.

Augmentation follows the usual recipe for this kind of model: flips, small
rotations, brightness/contrast jitter, and Gaussian noise, with the geometry
descriptor recomputed from the augmented mask rather than transformed
analytically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import GeometryDescriptor, extract_geometry, read_mask_image
from .semantics import (
    TEXT_EMBED_DIM,
    MockTextEncoder,
    SemanticReport,
    encode_report,
    read_embedding,
)

__all__ = [
    "StyleSpec",
    "DEFAULT_STYLES",
    "Sample",
    "AugmentConfig",
    "SynthConfig",
    "gen_sample",
    "augment",
    "shape_report",
    "ellipse_mask",
    "rectangle_mask",
    "blob_mask",
    "SyntheticDataset",
    "load_folder_dataset",
    "save_dataset",
    "MissingPairError",
]

SHAPE_KINDS = ("ellipse", "rectangle", "blob")
TEXTURES = ("none", "speckle", "stripes")

IMAGE_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
EMBEDDING_EXTENSION = ".c2pe"


class MissingPairError(ValueError):
    """Image/mask stems do not line up; the message lists the unmatched stems."""


@dataclass(frozen=True)
class StyleSpec:
    """A pseudo-modality: an intensity/texture recipe the renderer applies."""

    name: str
    fg_intensity: float
    bg_intensity: float
    noise_sigma: float = 0.02
    texture: str = "none"
    invert: bool = False

    def __post_init__(self):
        for label, v in (("fg", self.fg_intensity), ("bg", self.bg_intensity)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{label}_intensity {v} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}, want one of {TEXTURES}")


# Two deliberately opposite-contrast recipes, standing in for modalities whose
# raw pixel statistics conflict (bright lesion on dark ground vs the reverse).
DEFAULT_STYLES = (
    StyleSpec("bright", fg_intensity=0.8, bg_intensity=0.3, noise_sigma=0.02),
    StyleSpec(
        "dark_speckle",
        fg_intensity=0.25,
        bg_intensity=0.6,
        noise_sigma=0.03,
        texture="speckle",
    ),
)


@dataclass
class Sample:
    image: np.ndarray                   # (H, W) float32 in [0, 1]
    mask: np.ndarray                    # (H, W) uint8 in {0, 1}
    geometry: GeometryDescriptor        # always extract_geometry(mask)
    semantic: np.ndarray | None         # (9, text_dim) float32, or None
    sem_enabled: bool
    modality_id: int
    stem: str = ""


@dataclass
class SynthConfig:
    """Synthetic dataset shape/scale knobs used by the CLI and the trainer."""

    size: int = 64
    n_train: int = 2000
    n_val: int = 200
    seed: int = 0
    with_semantics: bool = True

    def __post_init__(self):
        if self.size % 32 != 0 or self.size < 32:
            raise ValueError("size must be a positive multiple of 32")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("dataset sizes must be >= 0")


# --------------------------------------------------------------------------
# rasterization on half-pixel centers


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates in pixel units: (0.5, 1.5, ...)."""
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def _rotated_offsets(size, cx, cy, phi):
    xs, ys = _pixel_grid(size)
    dx, dy = xs - cx, ys - cy
    cos_p, sin_p = math.cos(phi), math.sin(phi)
    return dx * cos_p + dy * sin_p, -dx * sin_p + dy * cos_p


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, phi: float = 0.0):
    """Filled ellipse; center/axes in pixel units, phi in radians."""
    u, v = _rotated_offsets(size, cx, cy, phi)
    return (((u / a) ** 2 + (v / b) ** 2) <= 1.0).astype(np.uint8)


def rectangle_mask(size: int, cx: float, cy: float, w: float, h: float, phi: float = 0.0):
    u, v = _rotated_offsets(size, cx, cy, phi)
    return ((np.abs(u) <= w / 2.0) & (np.abs(v) <= h / 2.0)).astype(np.uint8)


def blob_mask(size: int, cx: float, cy: float, r0: float, amps, phases):
    """Star-convex blob: radius modulated by low-order harmonics of the angle."""
    xs, ys = _pixel_grid(size)
    dx, dy = xs - cx, ys - cy
    theta = np.arctan2(dy, dx)
    radius = np.full_like(theta, r0)
    for k, (amp, phase) in enumerate(zip(amps, phases), start=2):
        radius = radius + r0 * amp * np.cos(k * theta + phase)
    return ((dx**2 + dy**2) <= radius**2).astype(np.uint8)


def _draw_mask(rng: np.random.Generator, size: int) -> tuple[str, np.ndarray]:
    """Draw shape kind and pose, then rasterize. Retries degenerate draws."""
    for _ in range(32):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        cx = rng.uniform(0.3, 0.7) * size
        cy = rng.uniform(0.3, 0.7) * size
        scale = rng.uniform(0.12, 0.28) * size
        ratio = rng.uniform(1.0, 3.0)
        phi = rng.uniform(0.0, math.pi)
        if kind == "ellipse":
            mask = ellipse_mask(size, cx, cy, scale, scale / ratio, phi)
        elif kind == "rectangle":
            mask = rectangle_mask(size, cx, cy, 2 * scale, 2 * scale / ratio, phi)
        else:
            amps = rng.uniform(0.0, 0.15, size=3)
            phases = rng.uniform(0.0, 2 * math.pi, size=3)
            mask = blob_mask(size, cx, cy, scale, amps, phases)
        if int(mask.sum()) >= 16:
            return kind, mask
    raise RuntimeError("could not draw a non-degenerate shape in 32 attempts")


def _render_image(
    rng: np.random.Generator, mask: np.ndarray, style: StyleSpec
) -> np.ndarray:
    size = mask.shape[0]
    fg, bg = style.fg_intensity, style.bg_intensity
    if style.invert:
        fg, bg = bg, fg
    img = np.where(mask > 0, fg, bg).astype(np.float64)
    if style.texture == "speckle":
        img = img * rng.uniform(0.7, 1.3, size=img.shape)
    elif style.texture == "stripes":
        xs, _ = _pixel_grid(size)
        img = img + 0.08 * np.sin(2 * math.pi * xs / 8.0)
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


_report_cache: dict[tuple[str, str], np.ndarray] = {}


def shape_report(kind: str, style: StyleSpec) -> SemanticReport:
    """Deterministic report for a (shape class, style) pair."""
    contrast = abs(style.fg_intensity - style.bg_intensity)
    texture_words = {
        "none": "homogeneous interior signal",
        "speckle": "granular speckled interior",
        "stripes": "periodic striped interior",
    }
    outline = {
        "ellipse": "smooth elliptical outline",
        "rectangle": "straight-edged angular outline",
        "blob": "gently lobulated outline",
    }
    return SemanticReport(
        morphology=f"well-circumscribed region with a {outline[kind]}",
        margin_definition="sharp, fully rasterized margin without haze",
        internal_texture=texture_words[style.texture],
        surrounding_interaction="no infiltration of the surrounding field",
        boundary_distinctness=(
            "high contrast against the background"
            if contrast >= 0.3
            else "subtle contrast against the background"
        ),
        malignancy_risk="not applicable for synthetic phantoms",
        pathological_inference=f"synthetic {kind} phantom in the {style.name} rendering style",
        differential_reasoning=f"distinguishable from other phantom classes by its {outline[kind]}",
        predicted_diagnosis=f"{kind} phantom",
    )


def _semantic_target(kind: str, style: StyleSpec) -> np.ndarray:
    key = (kind, style.name)
    if key not in _report_cache:
        encoder = MockTextEncoder(TEXT_EMBED_DIM)
        _report_cache[key] = encode_report(shape_report(kind, style), encoder)
    return _report_cache[key]


def gen_sample(
    seed, style: StyleSpec, size: int = 64, modality_id: int = 0,
    with_semantics: bool = True,
) -> Sample:
    """One synthetic sample. The mask depends only on (seed, size), never style."""
    if size % 32 != 0 or size < 32:
        raise ValueError("size must be a positive multiple of 32")
    rng = np.random.default_rng(seed)
    kind, mask = _draw_mask(rng, size)
    image = _render_image(rng, mask, style)
    return Sample(
        image=image,
        mask=mask,
        geometry=extract_geometry(mask),
        semantic=_semantic_target(kind, style) if with_semantics else None,
        sem_enabled=with_semantics,
        modality_id=modality_id,
        stem="",
    )


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rot_deg: float = 10.0
    brightness: float = 0.1
    contrast: float = 0.1
    noise_sigma: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.hflip_p <= 1.0 or not 0.0 <= self.vflip_p <= 1.0:
            raise ValueError("flip probabilities must be in [0, 1]")
        if self.rot_deg < 0 or self.brightness < 0 or self.contrast < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def augment(
    sample: Sample, rng: np.random.Generator, config: AugmentConfig | None = None
) -> Sample:
    """Spatial + photometric jitter; geometry recomputed from the new mask.

    Flips are exact array reversals. Rotation resamples the image bilinearly
    and the mask by nearest neighbor, then re-binarizes. The semantic target
    describes the shape class and style, both invariant here, so it is carried
    over unchanged.
    """
    cfg = config if config is not None else AugmentConfig()
    image = sample.image.astype(np.float64)
    mask = sample.mask

    if rng.random() < cfg.hflip_p:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < cfg.vflip_p:
        image, mask = image[::-1, :], mask[::-1, :]

    if cfg.rot_deg > 0:
        angle = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
        rotated = ndimage.rotate(
            mask.astype(np.float64), angle, reshape=False, order=0,
            mode="constant", cval=0.0,
        )
        mask = (rotated > 0.5).astype(np.uint8)
    else:
        mask = np.ascontiguousarray(mask)

    if cfg.contrast > 0:
        image = (image - 0.5) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + 0.5
    if cfg.brightness > 0:
        image = image + rng.uniform(-cfg.brightness, cfg.brightness)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)

    return replace(
        sample,
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        mask=np.ascontiguousarray(mask),
        geometry=extract_geometry(np.ascontiguousarray(mask)),
    )


# --------------------------------------------------------------------------
# datasets


class SyntheticDataset:
    """Lazily generated, per-index-seeded synthetic samples.

    Styles alternate deterministically over the index so every pseudo-modality
    is equally represented; the sample mask is independent of the style.
    """

    def __init__(
        self,
        n: int,
        size: int = 64,
        seed: int = 0,
        styles: tuple[StyleSpec, ...] = DEFAULT_STYLES,
        with_semantics: bool = True,
    ):
        if n < 0:
            raise ValueError("dataset length must be >= 0")
        if not styles:
            raise ValueError("need at least one style")
        self.n = n
        self.size = size
        self.seed = seed
        self.styles = tuple(styles)
        self.with_semantics = with_semantics
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        if i not in self._cache:
            style_idx = i % len(self.styles)
            sample = gen_sample(
                (self.seed, i),
                self.styles[style_idx],
                size=self.size,
                modality_id=style_idx,
                with_semantics=self.with_semantics,
            )
            sample.stem = f"{i:05d}"
            self._cache[i] = sample
        return self._cache[i]


def _stem_map(directory: Path, extensions) -> dict[str, Path]:
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in extensions and p.is_file():
            out[p.stem] = p
    return out


class FolderDataset:
    """Image/mask folder pairs, loaded lazily, geometry computed on access."""

    def __init__(self, images, masks, embeddings, modality_ids):
        self._images = images          # list[(stem, Path)]
        self._masks = masks            # dict[stem, Path]
        self._embeddings = embeddings  # dict[stem, Path] or None
        self._modality_ids = modality_ids
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self._images)

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < len(self._images):
            raise IndexError(i)
        if i in self._cache:
            return self._cache[i]
        stem, image_path = self._images[i]
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        mask = read_mask_image(self._masks[stem])
        if mask.shape != image.shape:
            raise ValueError(
                f"{stem}: image grid {image.shape} does not match mask grid {mask.shape}"
            )
        semantic = None
        sem_enabled = False
        if self._embeddings is not None and stem in self._embeddings:
            semantic = read_embedding(self._embeddings[stem])
            sem_enabled = True
        sample = Sample(
            image=image,
            mask=mask,
            geometry=extract_geometry(mask),
            semantic=semantic,
            sem_enabled=sem_enabled,
            modality_id=int(self._modality_ids.get(stem, 0)),
            stem=stem,
        )
        self._cache[i] = sample
        return sample


def load_folder_dataset(
    images_dir, masks_dir, embeddings_dir=None, manifest_path=None
) -> FolderDataset:
    """Pair up image/mask files by stem; optionally attach embeddings + ids.

    Samples without an embedding file are flagged sem-disabled rather than
    rejected, and the flag gates their semantic loss downstream. A manifest
    (JSON lines of {"stem", "modality_id"}) assigns pseudo-modality ids;
    unlisted stems get id 0.
    """
    images = _stem_map(images_dir, IMAGE_EXTENSIONS)
    masks = _stem_map(masks_dir, IMAGE_EXTENSIONS)
    missing_masks = sorted(set(images) - set(masks))
    missing_images = sorted(set(masks) - set(images))
    if missing_masks or missing_images:
        parts = []
        if missing_masks:
            parts.append(f"images without masks: {', '.join(missing_masks)}")
        if missing_images:
            parts.append(f"masks without images: {', '.join(missing_images)}")
        raise MissingPairError("; ".join(parts))

    embeddings = None
    if embeddings_dir is not None and Path(embeddings_dir).is_dir():
        embeddings = _stem_map(embeddings_dir, (EMBEDDING_EXTENSION,))

    modality_ids: dict[str, int] = {}
    if manifest_path is not None and Path(manifest_path).is_file():
        with open(manifest_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                modality_ids[str(row["stem"])] = int(row["modality_id"])
        unbacked = sorted(set(modality_ids) - set(images))
        if unbacked:
            raise MissingPairError(
                f"manifest entries without image files: {', '.join(unbacked)}"
            )

    ordered = [(stem, images[stem]) for stem in sorted(images)]
    return FolderDataset(ordered, masks, embeddings, modality_ids)


def save_dataset(dataset, out_dir) -> None:
    """Write a dataset as the folder layout load_folder_dataset reads back.

    images/<stem>.png, masks/<stem>.png, embeddings/<stem>.c2pe (for samples
    that carry semantics), manifest.jsonl with one {"stem", "modality_id"}
    line per sample. Deterministic: equal datasets produce identical bytes.
    """
    from .semantics import write_embedding

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        sample = dataset[i]
        stem = sample.stem or f"{i:05d}"
        img = np.clip(np.rint(sample.image.astype(np.float64) * 255.0), 0, 255)
        Image.fromarray(img.astype(np.uint8), mode="L").save(
            root / "images" / f"{stem}.png"
        )
        Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").save(
            root / "masks" / f"{stem}.png"
        )
        if sample.sem_enabled and sample.semantic is not None:
            (root / "embeddings").mkdir(exist_ok=True)
            write_embedding(root / "embeddings" / f"{stem}{EMBEDDING_EXTENSION}", sample.semantic)
        lines.append(json.dumps({"stem": stem, "modality_id": sample.modality_id}))
    (root / "manifest.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
