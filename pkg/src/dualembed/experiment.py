"""Glue between the dataset protocol, training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .data.augment import augment_dataset
from .data.manifest import DatasetManifest, split_train_val
from .evaluation import EvalReport, evaluate, reject_outliers, separation_stats
from .layers import Network, NetworkSpec
from .training import TrainConfig, train


def prepare_splits(manifest: DatasetManifest, copies: int, seed: int,
                   max_shift: Optional[int] = None, val_fraction: float = 0.1) -> DatasetManifest:
    """Split train 90/10 into train/val, then augment every split independently."""
    rng = np.random.default_rng([seed, 2])
    m = split_train_val(manifest, rng, val_fraction)
    out = []
    for split in ("train", "val", "test"):
        part = augment_dataset(m.subset(split), copies, np.random.default_rng([seed, 3, len(out)]), max_shift)
        out.extend(part.records)
    return m.with_records(out)


def restrict_classes(manifest: DatasetManifest, keep: Sequence[int]) -> DatasetManifest:
    """Keep only ``keep`` classes, relabelled 0..len(keep)-1 in the given order."""
    from dataclasses import replace

    remap = {c: i for i, c in enumerate(keep)}
    recs = [replace(r, class_id=remap[r.class_id]) for r in manifest.records if r.class_id in remap]
    m = replace(manifest, class_names=[manifest.class_names[c] for c in keep], records=recs)
    m._cache = manifest._cache
    return m


@dataclass
class RunResult:
    net: Network
    history: list
    report: Optional[EvalReport] = None
    separation: Optional[float] = None


def train_and_evaluate(prepared: DatasetManifest, spec: NetworkSpec, cfg: TrainConfig) -> RunResult:
    net, history, _ = train(prepared, spec, cfg)
    test = prepared.subset("test")
    x, y = test.arrays()
    rep = evaluate(net, x, y, test.variants(), prepared.unseen_variants, prepared.class_names)
    sep = separation_stats(net.embed(x, "classifier"), y).ratio
    return RunResult(net, history, rep, sep)


def rejection_run(manifest: DatasetManifest, confuser_class: int, spec_fn, cfg: TrainConfig,
                  copies: int, max_shift: Optional[int] = None):
    """Train on every class but ``confuser_class``; score its test chips as confusers.

    ``spec_fn(input_size, num_classes)`` builds the network. Returns (RocCurve, RunResult).
    """
    keep = [c for c in range(manifest.num_classes) if c != confuser_class]
    known = prepare_splits(restrict_classes(manifest, keep), copies, cfg.seed, max_shift)
    conf = prepare_splits(restrict_classes(manifest, [confuser_class]), copies, cfg.seed, max_shift)
    spec = spec_fn(manifest.chip_size, len(keep))
    res = train_and_evaluate(known, spec, cfg)
    roc = reject_outliers(res.net, known.subset("test").arrays()[0], conf.subset("test").arrays()[0])
    return roc, res


def repeat_over_seeds(fn, seeds: Sequence[int]) -> Dict[str, np.ndarray]:
    """Run ``fn(seed) -> dict of scalars`` per seed; stack the values per key.

    Our stand-in for k-fold error bars: mean and sample std over independent seeds.
    """
    rows = [fn(s) for s in seeds]
    return {k: np.array([r[k] for r in rows], dtype=np.float64) for k in rows[0]}


def summarize(values: np.ndarray) -> str:
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return f"{float(np.mean(values)):.4f} +/- {std:.4f} (n={len(values)} seeds)"
