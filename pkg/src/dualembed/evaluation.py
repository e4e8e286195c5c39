"""Accuracy reports, outlier-rejection ROC, separation statistics, 2-D projections."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .layers import Network


@dataclass
class EvalReport:
    overall_acc: float
    seen_acc: float
    unseen_acc: float
    confusion: np.ndarray
    per_class_acc: List[float]
    class_names: List[str] = field(default_factory=list)
    n_seen: int = 0
    n_unseen: int = 0

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "n_total": int(self.confusion.sum()),
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
            "per_class_acc": self.per_class_acc,
            "class_names": self.class_names,
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        # NaN (empty partitions) is emitted as null
        d = self.to_dict()
        for k in ("seen_acc", "unseen_acc", "overall_acc"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        d["per_class_acc"] = [None if math.isnan(a) else a for a in d["per_class_acc"]]
        return json.dumps(d, indent=2) + "\n"


def _acc(mask: np.ndarray, correct: np.ndarray) -> float:
    return float(correct[mask].mean()) if mask.any() else float("nan")


def report_from_predictions(pred: np.ndarray, labels: np.ndarray, unseen_mask: np.ndarray,
                            num_classes: int, class_names: Sequence[str] = ()) -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty test set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    correct = pred == labels
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / rows[c]) if rows[c] else float("nan") for c in range(num_classes)]
    unseen_mask = np.asarray(unseen_mask, dtype=bool)
    return EvalReport(
        overall_acc=float(np.trace(confusion) / confusion.sum()),
        seen_acc=_acc(~unseen_mask, correct),
        unseen_acc=_acc(unseen_mask, correct),
        confusion=confusion,
        per_class_acc=per_class,
        class_names=list(class_names),
        n_seen=int((~unseen_mask).sum()),
        n_unseen=int(unseen_mask.sum()),
    )


def evaluate(net: Network, images: np.ndarray, labels: np.ndarray, variants: Sequence[str],
             unseen_variants: Iterable[str], class_names: Sequence[str] = ()) -> EvalReport:
    """Predict argmax of the probability tap in inference mode and tabulate."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty test set")
    unseen = set(unseen_variants)
    mask = np.array([v in unseen for v in variants], dtype=bool)
    pred = np.argmax(net.predict_proba(images), axis=1)
    return report_from_predictions(pred, labels, mask, net.spec.num_classes, class_names)


def write_confusion_csv(path, report: EvalReport) -> None:
    names = report.class_names or [str(i) for i in range(len(report.confusion))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(names))
        for name, row in zip(names, report.confusion):
            w.writerow([name] + [int(x) for x in row])


# ---------------------------------------------------------------- rejection

@dataclass
class RocCurve:
    taus: np.ndarray
    pd: np.ndarray
    pfa: np.ndarray

    @property
    def auc(self) -> float:
        """Trapezoidal area under P_d versus P_fa, points sorted by P_fa."""
        order = np.lexsort((self.pd, self.pfa))
        x, y = self.pfa[order], self.pd[order]
        x = np.concatenate([[0.0], x, [1.0]])
        y = np.concatenate([[0.0], y, [1.0]])
        return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))

    def pfa_at_pd(self, target: float) -> float:
        """Smallest false-alarm rate among thresholds achieving P_d >= target."""
        ok = self.pd >= target
        return float(self.pfa[ok].min()) if ok.any() else 1.0

    def rows(self):
        return zip(self.taus.tolist(), self.pd.tolist(), self.pfa.tolist())


def default_taus(observed: Optional[np.ndarray] = None, n: int = 1001) -> np.ndarray:
    taus = np.linspace(0.0, 1.0, n)
    if observed is not None:
        taus = np.concatenate([taus, np.asarray(observed, dtype=np.float64).ravel()])
    return np.unique(taus)


def roc_from_scores(known_scores: np.ndarray, confuser_scores: np.ndarray,
                    taus: Optional[np.ndarray] = None) -> RocCurve:
    """A chip is declared a target iff its max posterior >= tau."""
    known_scores = np.asarray(known_scores, dtype=np.float64)
    confuser_scores = np.asarray(confuser_scores, dtype=np.float64)
    if len(confuser_scores) == 0:
        raise ValueError("outlier rejection needs at least one confuser chip")
    if len(known_scores) == 0:
        raise ValueError("outlier rejection needs at least one known chip")
    if taus is None:
        taus = default_taus(np.concatenate([known_scores, confuser_scores]))
    taus = np.sort(np.asarray(taus, dtype=np.float64))
    ks, cs = np.sort(known_scores), np.sort(confuser_scores)
    # count of scores >= tau
    pd = (len(ks) - np.searchsorted(ks, taus, side="left")) / len(ks)
    pfa = (len(cs) - np.searchsorted(cs, taus, side="left")) / len(cs)
    return RocCurve(taus, pd, pfa)


def reject_outliers(net: Network, known_images: np.ndarray, confuser_images: np.ndarray,
                    taus: Optional[Sequence[float]] = None) -> RocCurve:
    if len(confuser_images) == 0:
        raise ValueError("outlier rejection needs at least one confuser chip")
    known = net.predict_proba(known_images).max(axis=1)
    conf = net.predict_proba(confuser_images).max(axis=1)
    return roc_from_scores(known, conf, None if taus is None else np.asarray(taus))


def write_roc_csv(path, roc: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "pd", "pfa"])
        for t, d, f in roc.rows():
            w.writerow([repr(t), repr(d), repr(f)])


# ---------------------------------------------------------------- geometry

def orthogonal_projection(vectors: np.ndarray, axis_i: int, axis_j: int) -> np.ndarray:
    vectors = np.asarray(vectors)
    k = vectors.shape[1]
    if axis_i == axis_j:
        raise ValueError("projection axes must differ")
    for a in (axis_i, axis_j):
        if not 0 <= a < k:
            raise IndexError(f"axis {a} out of range for {k}-dimensional vectors")
    return vectors[:, [axis_i, axis_j]].copy()


def _power_top(cov: np.ndarray, rng: np.random.Generator, iters: int, tol: float):
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = cov @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return v, 0.0
        w /= nrm
        lam_new = float(w @ cov @ w)
        if np.linalg.norm(w - v) < tol or abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            v, lam = w, lam_new
            break
        v, lam = w, lam_new
    return v, lam


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    mean: np.ndarray


def pca_projection(vectors: np.ndarray, iters: int = 5000, tol: float = 1e-12, seed: int = 0) -> PcaResult:
    """Top-2 principal directions by power iteration with deflation.

    Each direction is flipped so its largest-magnitude loading is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n < 3:
        raise ValueError("PCA projection needs at least 3 points")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    comps, lams = [], []
    work = cov.copy()
    scale = max(total, 1e-300)
    for c in range(min(2, d)):
        v, lam = _power_top(work, rng, iters, tol)
        if lam <= 1e-12 * scale:
            if c == 1:
                warnings.warn("data are rank-deficient beyond one dimension; second component zeroed")
            v, lam = np.zeros(d), 0.0
        else:
            # one Rayleigh refinement on the undeflated matrix
            lam = float(v @ cov @ v)
            v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        lams.append(lam)
        work = work - lam * np.outer(v, v)
    while len(comps) < 2:
        comps.append(np.zeros(d))
        lams.append(0.0)
    comps = np.array(comps)
    coords = xc @ comps.T
    lams = np.array(lams)
    ratio = lams / total if total > 0 else np.zeros(2)
    return PcaResult(coords, comps, lams, ratio, mean)


@dataclass
class SeparationStats:
    intra_variance: np.ndarray  # per class, mean squared distance to centroid
    centroid_distances: np.ndarray  # k x k
    ratio: float
    degenerate: bool = False
    singleton_classes: List[int] = field(default_factory=list)
    classes: List[int] = field(default_factory=list)


def separation_stats(embeddings: np.ndarray, labels: np.ndarray) -> SeparationStats:
    """Cohesion/separation summary.

    ratio = min inter-centroid distance / max per-class RMS spread. Zero spread
    yields ratio = inf with ``degenerate`` set.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise ValueError("separation statistics need at least two classes")
    # centering first keeps the statistics translation invariant in floating point
    x = x - x.mean(axis=0)
    cents, intra, singles = [], [], []
    for c in classes:
        pts = x[labels == c]
        cen = pts.mean(axis=0)
        cents.append(cen)
        if len(pts) < 2:
            singles.append(c)
            intra.append(0.0)
        else:
            intra.append(float(np.mean(np.sum((pts - cen) ** 2, axis=1))))
    cents = np.array(cents)
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    iu = np.triu_indices(len(classes), 1)
    min_inter = float(dist[iu].min())
    max_spread = float(np.sqrt(max(intra)))
    degenerate = max_spread == 0.0
    ratio = math.inf if degenerate else min_inter / max_spread
    return SeparationStats(np.array(intra), dist, ratio, degenerate, singles, classes)


def write_projection_csv(path, coords: np.ndarray, labels, variants, splits) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "class", "variant", "split"])
        for (x, y), c, v, s in zip(coords.tolist(), labels, variants, splits):
            w.writerow([repr(float(x)), repr(float(y)), c, v, s])
