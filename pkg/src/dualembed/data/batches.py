"""Index streams for plain and Siamese-pair minibatches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np


@dataclass(frozen=True)
class PairBatch:
    idx_a: np.ndarray
    idx_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    same: np.ndarray

    def concatenated(self) -> np.ndarray:
        """Indices of the combined [A; B] minibatch fed to the network."""
        return np.concatenate([self.idx_a, self.idx_b])


def make_plain_batches(n: int, batch_size: int, shuffle: bool,
                       rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Yield index arrays covering range(n) once; the final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def sample_pairs(labels: np.ndarray, num_pairs: int, pos_fraction: float,
                 rng: np.random.Generator):
    """Draw anchor/partner index pairs.

    Anchors are uniform over samples. With probability ``pos_fraction`` the
    partner is another sample of the anchor's class; otherwise it is uniform
    over samples of other classes. Anchors from singleton classes are redrawn
    from classes that can form a positive pair, and when none exists every pair
    is negative.
    """
    if not 0 < pos_fraction < 1:
        raise ValueError("pos_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("pair sampling needs at least two classes")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    pos_ok = np.concatenate([members[c] for c in classes if len(members[c]) >= 2] or [np.empty(0, int)])
    a = np.empty(num_pairs, dtype=np.int64)
    b = np.empty(num_pairs, dtype=np.int64)
    want_pos = rng.random(num_pairs) < pos_fraction
    n = len(labels)
    for i in range(num_pairs):
        if want_pos[i] and len(pos_ok):
            anchor = int(rng.integers(n))
            if len(members[labels[anchor]]) < 2:
                anchor = int(pos_ok[rng.integers(len(pos_ok))])
            pool = members[labels[anchor]]
            j = int(rng.integers(len(pool) - 1))
            if j >= np.searchsorted(pool, anchor):
                j += 1
            partner = pool[j]
        else:
            anchor = int(rng.integers(n))
            others = np.flatnonzero(labels != labels[anchor])
            partner = others[rng.integers(len(others))]
        a[i], b[i] = anchor, partner
    return a, b


def make_pair_batches(labels: np.ndarray, batch_size: int, pos_fraction: float,
                      rng: np.random.Generator, num_pairs: Optional[int] = None) -> Iterator[PairBatch]:
    """Yield PairBatch objects of batch_size/2 pairs each.

    ``num_pairs`` defaults to len(labels)//2 so an epoch pushes about as many
    images through the network as a plain epoch.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"pair batches need an even batch_size >= 2, got {batch_size}")
    labels = np.asarray(labels)
    if num_pairs is None:
        num_pairs = len(labels) // 2
    a, b = sample_pairs(labels, num_pairs, pos_fraction, rng)
    half = batch_size // 2
    for s in range(0, num_pairs, half):
        ia, ib = a[s:s + half], b[s:s + half]
        la, lb = labels[ia], labels[ib]
        yield PairBatch(ia, ib, la, lb, la == lb)
