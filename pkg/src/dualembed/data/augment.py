"""Translation augmentation with mirrored borders."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .manifest import Chip, DatasetManifest


def shift_image(image: np.ndarray, u: int, v: int) -> np.ndarray:
    """Translate by ``u`` columns (right positive) and ``v`` rows (down positive).

    Vacated pixels take the mirror image of the content across the old edge,
    so the first vacated column duplicates the adjacent in-bounds column.
    """
    h, w = image.shape
    if abs(u) > w or abs(v) > h:
        raise ValueError(f"shift ({u}, {v}) exceeds image size {w}x{h}")
    au, av = abs(u), abs(v)
    padded = np.pad(image, ((av, av), (au, au)), mode="symmetric")
    return padded[av - v:av - v + h, au - u:au - u + w].copy()


def translate_augment(chip: Chip, u: int, v: int, max_shift: int) -> Chip:
    if abs(u) > max_shift or abs(v) > max_shift:
        raise ValueError(f"shift ({u}, {v}) beyond max_shift {max_shift}")
    if u == 0 and v == 0:
        return chip
    return Chip(shift_image(chip.image, u, v), chip.class_id, chip.variant, chip.split)


def default_max_shift(chip_size: int) -> int:
    return max(1, chip_size // 8)


def augment_dataset(manifest: DatasetManifest, copies: int, rng: np.random.Generator,
                    max_shift: int | None = None) -> DatasetManifest:
    """Keep every chip and add ``copies`` shifted versions of each.

    Offsets are integers drawn uniformly from [-max_shift, max_shift]^2 excluding
    (0, 0). Records stay in order: each original is followed by its copies.
    """
    if copies < 0:
        raise ValueError("copies must be >= 0")
    if copies == 0:
        return manifest
    if max_shift is None:
        max_shift = default_max_shift(manifest.chip_size)
    if max_shift < 1:
        raise ValueError("max_shift must be >= 1 when copies > 0")
    out = []
    for rec in manifest.records:
        out.append(rec)
        drawn = 0
        while drawn < copies:
            u, v = (int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))
            if u == 0 and v == 0:
                continue
            out.append(replace(rec, shift=(u, v)))
            drawn += 1
    return manifest.with_records(out)
