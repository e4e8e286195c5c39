"""Classification, contrastive and center losses and their dual combination."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .layers import TAPS, ForwardTrace

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("none", "contrastive", "center")
DEFAULT_LAMBDA = {"none": 0.0, "contrastive": 1.0, "center": 3e-3}


@dataclass(frozen=True)
class LossConfig:
    embedding_kind: str = "none"
    placement: str = "classifier"
    lam: Optional[float] = None
    m_s: float = 0.0
    m_d: float = 1.0
    center_rate: float = 0.5
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.embedding_kind not in EMBEDDING_KINDS:
            raise ValueError(f"embedding_kind must be one of {EMBEDDING_KINDS}, got {self.embedding_kind!r}")
        if self.placement not in TAPS:
            raise ValueError(f"placement must be one of {TAPS}, got {self.placement!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.embedding_kind])
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.m_s < 0 or self.m_d <= 0 or self.m_d <= self.m_s:
            raise ValueError(f"margins need 0 <= m_s < m_d, got m_s={self.m_s} m_d={self.m_d}")
        if not 0 < self.center_rate <= 1:
            raise ValueError(f"center_rate must lie in (0, 1], got {self.center_rate}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class CenterBank:
    centers: np.ndarray  # k x d
    initialized: np.ndarray  # k bools

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "CenterBank":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool))

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy(), self.initialized.copy())


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient (p - onehot) / B."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    return loss, grad / b


def contrastive_loss(emb_a: np.ndarray, emb_b: np.ndarray, same: np.ndarray,
                     m_s: float = 0.0, m_d: float = 1.0):
    """Mean pairwise hinge loss on squared distances.

    Returns (loss, grad_a, grad_b). Hinges are inactive exactly at the margin.
    """
    same = np.asarray(same, dtype=bool)
    if emb_a.shape != emb_b.shape:
        raise ValueError(f"pair embeddings differ in shape: {emb_a.shape} vs {emb_b.shape}")
    n = emb_a.shape[0]
    if n == 0:
        raise ValueError("contrastive loss needs at least one pair")
    if same.shape != (n,):
        raise ValueError("same flags must have one entry per pair")
    diff = emb_a - emb_b
    d2 = np.einsum("ij,ij->i", diff, diff)
    sim = np.maximum(0.0, d2 - m_s)
    dis = np.maximum(0.0, m_d - d2)
    per_pair = np.where(same, sim, dis)
    # d(per_pair)/d(d2): +1 for active similar, -1 for active dissimilar
    coeff = np.where(same, (d2 > m_s).astype(float), -(d2 < m_d).astype(float))
    grad_a = (2.0 / n) * coeff[:, None] * diff
    return float(per_pair.mean()), grad_a.astype(emb_a.dtype, copy=False), (-grad_a).astype(emb_a.dtype, copy=False)


def _centers_with_init(embs, labels, bank: CenterBank):
    centers = bank.centers.copy()
    initialized = bank.initialized.copy()
    for y in np.unique(labels):
        if not initialized[y]:
            centers[y] = embs[labels == y].mean(axis=0)
            initialized[y] = True
    return centers, initialized


def center_loss(embs: np.ndarray, labels: np.ndarray, bank: CenterBank, center_rate: float = 0.5):
    """Center loss (1/2B) sum ||e_i - c_{y_i}||^2 against the current centers.

    Classes seen for the first time get their center set to this batch's class
    mean before the loss is computed. Returns (loss, grad_embs, updated_bank);
    the input bank is not modified. The updated bank moves each present class
    center by ``center_rate`` times the mean offset toward its batch members.
    """
    labels = np.asarray(labels)
    b, d = embs.shape
    if bank.centers.shape[1] != d:
        raise ValueError(f"center bank dimension {bank.centers.shape[1]} != embedding dimension {d}")
    centers, initialized = _centers_with_init(embs, labels, bank)
    diff = embs - centers[labels]
    loss = float(np.einsum("ij,ij->", diff, diff) / (2 * b))
    grad = diff / b
    new_centers = centers.copy()
    for y in np.unique(labels):
        offset = (centers[y] - embs[labels == y]).mean(axis=0)
        new_centers[y] = centers[y] - center_rate * offset
    return loss, grad.astype(embs.dtype, copy=False), CenterBank(new_centers, initialized)


def weight_penalty(params: Dict[str, np.ndarray], weight_decay: float) -> float:
    if weight_decay == 0:
        return 0.0
    return float(weight_decay * sum(np.sum(np.square(v, dtype=np.float64))
                                    for n, v in params.items() if n.endswith(".weight")))


def weight_penalty_grads(params: Dict[str, np.ndarray], weight_decay: float) -> Dict[str, np.ndarray]:
    return {n: 2 * weight_decay * v for n, v in params.items() if n.endswith(".weight")}


@dataclass
class DualLossResult:
    total: float
    ce: float
    embed: float
    reg: float
    d_classifier: np.ndarray
    tap_grads: Dict[str, np.ndarray] = field(default_factory=dict)
    bank: Optional[CenterBank] = None

    def components(self) -> Dict[str, float]:
        return {"ce": self.ce, "embed": self.embed, "reg": self.reg, "total": self.total}


_warned_prob_center = False


def dual_loss(trace: ForwardTrace, labels: np.ndarray, cfg: LossConfig,
              bank: Optional[CenterBank] = None,
              params: Optional[Dict[str, np.ndarray]] = None) -> DualLossResult:
    """CE + lam * embedding + weight decay, with gradients at the network taps.

    For contrastive loss the batch is [A-half; B-half] and pair i is
    (i, i + B/2). The returned ``d_classifier`` holds the CE gradient plus the
    embedding gradient when placement is the classifier tap; embedding
    gradients for the other taps go in ``tap_grads``. Weight decay gradients are
    not included here; see :func:`weight_penalty_grads`.
    """
    global _warned_prob_center
    labels = np.asarray(labels)
    ce, d_logits = softmax_cross_entropy(trace.classifier, labels)
    reg = weight_penalty(params, cfg.weight_decay) if params is not None else 0.0
    embed = 0.0
    tap_grads: Dict[str, np.ndarray] = {}
    new_bank = bank
    kind = cfg.embedding_kind
    if kind != "none":
        emb = trace.tap(cfg.placement)
        if kind == "contrastive":
            b = emb.shape[0]
            if b % 2:
                raise ValueError(f"contrastive loss needs an even batch, got {b}")
            h = b // 2
            same = labels[:h] == labels[h:]
            embed, ga, gb = contrastive_loss(emb[:h], emb[h:], same, cfg.m_s, cfg.m_d)
            g = np.concatenate([ga, gb], axis=0)
        else:
            if bank is None:
                raise ValueError("center loss needs a CenterBank")
            if cfg.placement == "probability" and not _warned_prob_center:
                log.warning("center loss on the probability tap is outside the swept configurations")
                _warned_prob_center = True
            embed, g, new_bank = center_loss(emb, labels, bank, cfg.center_rate)
        if cfg.lam != 0:
            g = cfg.lam * g
            if cfg.placement == "classifier":
                d_logits = d_logits + g
            else:
                tap_grads[cfg.placement] = g
    total = ce + cfg.lam * embed + reg
    return DualLossResult(total, ce, embed, reg, d_logits, tap_grads, new_bank)
