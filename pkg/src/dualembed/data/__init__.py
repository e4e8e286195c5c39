from .augment import augment_dataset, default_max_shift, shift_image, translate_augment
from .batches import PairBatch, make_pair_batches, make_plain_batches, sample_pairs
from .manifest import (Chip, ChipRecord, DatasetManifest, load_chip, load_manifest,
                       save_manifest, split_train_val)
from .pgm import PGMError, load_normalized, read_pgm, write_pgm
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "Chip", "ChipRecord", "DatasetManifest", "PairBatch", "PGMError", "SyntheticConfig",
    "augment_dataset", "default_max_shift", "generate_synthetic", "load_chip", "load_manifest",
    "load_normalized", "make_pair_batches", "make_plain_batches", "read_pgm", "sample_pairs",
    "save_manifest", "shift_image", "split_train_val", "translate_augment", "write_pgm",
]
