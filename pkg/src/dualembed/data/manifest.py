"""Chip records, the CSV manifest, and conversion to training arrays."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pgm import load_normalized

MANIFEST_HEADER = ["path", "class", "variant", "split"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Chip:
    image: np.ndarray
    class_id: int
    variant: str
    split: str = "train"


@dataclass(frozen=True)
class ChipRecord:
    path: str
    class_id: int
    variant: str
    split: str
    shift: Tuple[int, int] = (0, 0)


@dataclass
class DatasetManifest:
    root: Path
    chip_size: int
    class_names: List[str]
    records: List[ChipRecord]
    unseen_variants: frozenset = frozenset()
    sqrt_preprocess: bool = False
    _cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.unseen_variants = frozenset(self.unseen_variants)
        k = len(self.class_names)
        for r in self.records:
            if not 0 <= r.class_id < k:
                raise ValueError(f"{r.path}: class id {r.class_id} outside the {k} manifest classes")
            if r.split not in SPLITS:
                raise ValueError(f"{r.path}: unknown split {r.split!r}")
            if r.split == "train" and r.variant in self.unseen_variants:
                raise ValueError(f"{r.path}: unseen variant {r.variant!r} assigned to train")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str | Sequence[str]) -> "DatasetManifest":
        splits = {split} if isinstance(split, str) else set(split)
        return self.with_records([r for r in self.records if r.split in splits])

    def with_records(self, records: List[ChipRecord]) -> "DatasetManifest":
        m = replace(self, records=list(records))
        m._cache = self._cache  # originals are shared; shifts are applied on access
        return m

    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def variants(self) -> np.ndarray:
        return np.array([r.variant for r in self.records], dtype=object)

    def class_counts(self, split: Optional[str] = None) -> Dict[int, int]:
        counts = {c: 0 for c in range(self.num_classes)}
        for r in self.records:
            if split is None or r.split == split:
                counts[r.class_id] += 1
        return counts

    def base_image(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = load_normalized(self.root / path, self.sqrt_preprocess)
            if img.shape != (self.chip_size, self.chip_size):
                raise ValueError(f"{path}: chip is {img.shape}, manifest chip size is {self.chip_size}")
            self._cache[path] = img
        return img

    def chip(self, index: int) -> Chip:
        from .augment import shift_image

        r = self.records[index]
        img = self.base_image(r.path)
        if r.shift != (0, 0):
            img = shift_image(img, *r.shift)
        return Chip(img, r.class_id, r.variant, r.split)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Images (N x H x W, float64) with shifts applied, and labels."""
        images = np.empty((len(self.records), self.chip_size, self.chip_size))
        for i in range(len(self.records)):
            images[i] = self.chip(i).image
        return images, self.labels()

    def metadata(self) -> dict:
        return {
            "chip_size": self.chip_size,
            "class_names": list(self.class_names),
            "unseen_variants": sorted(self.unseen_variants),
            "sqrt_preprocess": self.sqrt_preprocess,
        }


def save_manifest(manifest: DatasetManifest, directory=None, extra: Optional[dict] = None) -> Path:
    """Write manifest.csv and the provenance.json sidecar (dataset metadata plus ``extra``)."""
    directory = Path(directory or manifest.root)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            if r.shift != (0, 0):
                raise ValueError("augmented records are in-memory only and cannot be written")
            w.writerow([r.path, manifest.class_names[r.class_id], r.variant, r.split])
    prov = {"dataset": manifest.metadata()}
    if extra:
        prov.update(extra)
    (directory / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(directory, unseen_variants: Optional[Sequence[str]] = None,
                  sqrt_preprocess: Optional[bool] = None) -> DatasetManifest:
    """Read ``manifest.csv`` and, if present, ``provenance.json`` from a directory.

    Without a sidecar the class list is the sorted set of class names, the chip
    size comes from the first image, and unseen variants are those that never
    appear in the train split.
    """
    directory = Path(directory)
    path = directory / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    meta = {}
    prov_path = directory / "provenance.json"
    if prov_path.is_file():
        meta = json.loads(prov_path.read_text()).get("dataset", {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rows.append(row)
    class_names = meta.get("class_names") or sorted({r[1] for r in rows})
    index = {name: i for i, name in enumerate(class_names)}
    records = []
    for lineno, (p, cls, variant, split) in enumerate(rows, start=2):
        if cls not in index:
            raise ValueError(f"{path}:{lineno}: class {cls!r} not among manifest classes {class_names}")
        records.append(ChipRecord(p, index[cls], variant, split))
    if unseen_variants is None:
        if "unseen_variants" in meta:
            unseen_variants = meta["unseen_variants"]
        else:
            train_vars = {r.variant for r in records if r.split == "train"}
            unseen_variants = sorted({r.variant for r in records} - train_vars)
    sqrt_flag = meta.get("sqrt_preprocess", False) if sqrt_preprocess is None else sqrt_preprocess
    chip_size = meta.get("chip_size")
    if chip_size is None:
        if not records:
            raise ValueError(f"{path}: empty manifest and no chip size recorded")
        chip_size = load_normalized(directory / records[0].path).shape[0]
    return DatasetManifest(directory, int(chip_size), list(class_names), records,
                           frozenset(unseen_variants), bool(sqrt_flag))


def load_chip(manifest: DatasetManifest, index: int) -> Chip:
    return manifest.chip(index)


def split_train_val(manifest: DatasetManifest, rng: np.random.Generator,
                    val_fraction: float = 0.1) -> DatasetManifest:
    """Move a class-stratified ``val_fraction`` of train records to the val split."""
    records = list(manifest.records)
    for c in range(manifest.num_classes):
        idx = [i for i, r in enumerate(records) if r.split == "train" and r.class_id == c]
        if len(idx) < 2:
            continue
        n_val = max(1, int(round(val_fraction * len(idx))))
        chosen = rng.choice(len(idx), size=n_val, replace=False)
        for j in chosen:
            records[idx[j]] = replace(records[idx[j]], split="val")
    return manifest.with_records(records)
