"""Synthetic chip generator with a seen/unseen variant protocol.

Each class is a shape family rendered with per-sample rotation, position and
size jitter. Variants within a class apply a fixed style perturbation
(stroke thickness and aspect ratio); the last ``unseen_variants`` variants of
every class use a perturbation direction not covered by the seen ones and only
appear in the test split. Images carry multiplicative speckle over a dim
background.
"""
from __future__ import annotations

import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .manifest import ChipRecord, DatasetManifest, save_manifest
from .pgm import quantize, write_pgm

FAMILIES = ("bar", "ellipse", "cross", "ring")
MAXVAL = 65535


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    chip_size: int = 32
    seen_variants: int = 2
    unseen_variants: int = 1
    train_per_variant: int = 200
    test_per_variant: int = 200
    noise: float = 0.5
    style_gap: float = 1.5
    position_jitter: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.unseen_variants < 1 or self.seen_variants < 1:
            raise ValueError("need at least one seen and one unseen variant per class")
        if self.chip_size < 8:
            raise ValueError("chip_size must be >= 8")
        if self.train_per_variant < 1 or self.test_per_variant < 1:
            raise ValueError("per-variant sample counts must be >= 1")
        if self.noise < 0 or self.style_gap < 0:
            raise ValueError("noise and style_gap must be >= 0")


def class_names(num_classes: int) -> list[str]:
    names = []
    for c in range(num_classes):
        fam = FAMILIES[c % len(FAMILIES)]
        names.append(fam if c < len(FAMILIES) else f"{fam}{c // len(FAMILIES)}")
    return names


def variant_style(j: int, seen: int, gap: float) -> tuple[float, float]:
    """(thickness multiplier, aspect multiplier) for the j-th variant.

    Seen variants spread along the thickness axis; unseen ones are displaced
    along the aspect axis, which training never varies systematically.
    """
    if j < seen:
        t = 0.0 if seen == 1 else -0.2 + 0.4 * j / (seen - 1)
        return 1.0 + gap * t, 1.0
    u = j - seen + 1
    return 1.0 + gap * 0.1 * u, 1.0 + gap * 0.3 * u


def _soft_mask(sd: np.ndarray, edge: float = 0.6) -> np.ndarray:
    # sd < 0 inside; logistic edge about one pixel wide
    return 1.0 / (1.0 + np.exp(np.clip(sd / edge, -50, 50)))


def render_shape(family_idx: int, scale: float, size: int, theta: float, cx: float, cy: float,
                 thick: float, aspect: float) -> np.ndarray:
    """Intensity in [0, 1] of one shape on a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    xr, yr = c * x + s * y, -s * x + c * y
    u = size / 32.0 * scale
    fam = FAMILIES[family_idx % len(FAMILIES)]
    if fam == "bar":
        half_l, half_t = 8.5 * u * aspect, 2.2 * u * thick
        sd = np.maximum(np.abs(xr) - half_l, np.abs(yr) - half_t)
    elif fam == "ellipse":
        a, b = 7.0 * u * aspect, 4.6 * u * thick
        r = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
        sd = (r - 1.0) * min(a, b)
    elif fam == "cross":
        half_l, half_t = 7.5 * u * aspect, 1.7 * u * thick
        sd1 = np.maximum(np.abs(xr) - half_l, np.abs(yr) - half_t)
        sd2 = np.maximum(np.abs(yr) - half_l / aspect ** 2, np.abs(xr) - half_t)
        sd = np.minimum(sd1, sd2)
    else:
        radius, half_t = 6.5 * u, 1.4 * u * thick
        rr = np.sqrt((xr / aspect) ** 2 + (yr * aspect) ** 2)
        sd = np.abs(rr - radius) - half_t
    return _soft_mask(sd)


def render_chip(cfg: SyntheticConfig, class_id: int, style: tuple[float, float],
                rng: np.random.Generator) -> np.ndarray:
    size = cfg.chip_size
    fam = class_id % len(FAMILIES)
    scale = 1.0 + 0.2 * (class_id // len(FAMILIES))
    thick, aspect = style
    theta = rng.uniform(0, np.pi)
    cx = (size - 1) / 2 + rng.uniform(-cfg.position_jitter, cfg.position_jitter)
    cy = (size - 1) / 2 + rng.uniform(-cfg.position_jitter, cfg.position_jitter)
    jitter = rng.uniform(0.9, 1.1)
    shape = render_shape(fam, scale * jitter, size, theta, cx, cy,
                         thick * rng.uniform(0.9, 1.1), aspect * rng.uniform(0.95, 1.05))
    brightness = rng.uniform(0.55, 0.8)
    img = 0.12 + brightness * shape
    if cfg.noise > 0:
        looks = 1.0 / cfg.noise ** 2
        img = img * rng.gamma(looks, 1.0 / looks, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SyntheticConfig, out_dir, overwrite: bool = True) -> DatasetManifest:
    """Render the dataset to ``out_dir`` (chips/, manifest.csv, provenance.json)."""
    cfg.validate()
    out_dir = Path(out_dir)
    chips_dir = out_dir / "chips"
    if chips_dir.exists() and overwrite:
        shutil.rmtree(chips_dir)
    chips_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    names = class_names(cfg.num_classes)
    total_variants = cfg.seen_variants + cfg.unseen_variants
    records, unseen, cache = [], set(), {}
    for c, name in enumerate(names):
        for j in range(total_variants):
            variant = f"{name}-sn{j}"
            style = variant_style(j, cfg.seen_variants, cfg.style_gap)
            is_unseen = j >= cfg.seen_variants
            if is_unseen:
                unseen.add(variant)
            plan = [("test", cfg.test_per_variant)] if is_unseen else \
                [("train", cfg.train_per_variant), ("test", cfg.test_per_variant)]
            for split, count in plan:
                for i in range(count):
                    pix = quantize(render_chip(cfg, c, style, rng), MAXVAL)
                    rel = f"chips/{name}/{variant}_{split}_{i:04d}.pgm"
                    (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_pgm(out_dir / rel, pix, MAXVAL)
                    cache[rel] = pix / float(MAXVAL)
                    records.append(ChipRecord(rel, c, variant, split))
    manifest = DatasetManifest(out_dir, cfg.chip_size, names, records, frozenset(unseen))
    manifest._cache.update(cache)
    save_manifest(manifest, out_dir, extra={"generator": asdict(cfg)})
    return manifest
