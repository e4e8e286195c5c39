"""SGD-momentum training with the dual loss, checkpointing and resume."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .data.batches import make_pair_batches, make_plain_batches
from .data.manifest import DatasetManifest
from .layers import Network, NetworkSpec
from .losses import CenterBank, LossConfig, dual_loss, weight_penalty_grads

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "ce", "embed", "reg", "total", "val_acc"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, norms: Dict[str, float]):
        detail = ", ".join(f"{k}={v:.3g}" for k, v in norms.items())
        super().__init__(f"{message}; activation norms: {detail}")
        self.norms = norms


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 14
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1
    pos_fraction: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must satisfy 0 <= momentum < 1")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if self.loss.embedding_kind == "contrastive" and self.batch_size % 2:
            raise ValueError("contrastive training needs an even batch_size")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_interval <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_interval)

    @property
    def effective_kind(self) -> str:
        # lam == 0 is the plain CE pathway, including its batch stream
        return "none" if self.loss.lam == 0 else self.loss.embedding_kind


def run_hash(spec: NetworkSpec, cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("epochs")
    d.pop("eval_every")
    return config_hash({"spec": spec.to_dict(), "train": d})


@dataclass
class TrainState:
    net: Network
    bank: Optional[CenterBank]
    velocity: Dict[str, np.ndarray]
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    best_params: Dict[str, np.ndarray] = field(default_factory=dict)
    best_buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def best_network(self) -> Network:
        if not self.best_params:
            return self.net.copy()
        return Network(self.net.spec, {k: v.copy() for k, v in self.best_params.items()},
                       {k: v.copy() for k, v in self.best_buffers.items()}, self.net.dtype)


def init_state(spec: NetworkSpec, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0])
    net = Network.initialize(spec, rng, np.dtype(cfg.dtype))
    bank = None
    if cfg.loss.embedding_kind == "center":
        dim = spec.feature_dim if cfg.loss.placement == "feature" else spec.num_classes
        bank = CenterBank.empty(spec.num_classes, dim)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    return TrainState(net, bank, velocity)


def activation_norms(trace) -> Dict[str, float]:
    norms = {k: float(np.linalg.norm(v)) for k, v in trace.activations.items()}
    for tap in ("feature", "classifier", "probability"):
        norms[tap] = float(np.linalg.norm(trace.tap(tap)))
    return norms


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, lr: Optional[float] = None) -> Dict[str, float]:
    """One forward/backward/update on a batch; mutates ``state`` in place."""
    net = state.net
    lr = cfg.learning_rate if lr is None else lr
    loss_cfg = cfg.loss if cfg.effective_kind == cfg.loss.embedding_kind else replace(cfg.loss, embedding_kind="none")
    trace = net.forward(images, train=True)
    res = dual_loss(trace, labels, loss_cfg, state.bank, net.params)
    if not np.isfinite(res.total):
        raise TrainingDiverged(f"non-finite loss {res.total} at epoch {state.epoch}", activation_norms(trace))
    grads = net.backward(trace, res.d_classifier, res.tap_grads.get("feature"),
                         res.tap_grads.get("probability"))
    if loss_cfg.weight_decay:
        for name, g in weight_penalty_grads(net.params, loss_cfg.weight_decay).items():
            grads[name] = grads[name] + g
    mu = cfg.momentum
    for name, w in net.params.items():
        v = state.velocity[name]
        v *= mu
        v -= lr * grads[name].astype(w.dtype, copy=False)
        w += v
    if loss_cfg.embedding_kind == "center":
        state.bank = res.bank
    return res.components()


def epoch_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1, epoch])


def epoch_batches(labels: np.ndarray, cfg: TrainConfig, epoch: int) -> Iterator[np.ndarray]:
    """Index arrays for one epoch, fully determined by (config, epoch)."""
    rng = epoch_rng(cfg, epoch)
    if cfg.effective_kind == "contrastive":
        for pb in make_pair_batches(labels, cfg.batch_size, cfg.pos_fraction, rng):
            if len(pb.idx_a):
                yield pb.concatenated()
        return
    batches = list(make_plain_batches(len(labels), cfg.batch_size, True, rng))
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    yield from batches


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = np.argmax(net.predict_proba(images), axis=1)
    return float(np.mean(pred == labels))


def run_epochs(state: TrainState, train_x, train_y, val_x, val_y, cfg: TrainConfig,
               on_epoch=None) -> TrainState:
    """Continue training ``state`` until ``cfg.epochs`` epochs are complete."""
    while state.epoch < cfg.epochs:
        lr = cfg.lr_at(state.epoch)
        sums = {"ce": 0.0, "embed": 0.0, "reg": 0.0, "total": 0.0}
        steps = 0
        for idx in epoch_batches(train_y, cfg, state.epoch):
            m = train_step(state, train_x[idx], train_y[idx], cfg, lr)
            for k in sums:
                sums[k] += m[k]
            steps += 1
        state.epoch += 1
        row = {"epoch": state.epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
        if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs:
            row["val_acc"] = accuracy(state.net, val_x, val_y) if len(val_y) else float("nan")
            score = row["val_acc"] if np.isfinite(row["val_acc"]) else -1.0
            # strict improvement keeps the earlier epoch on ties
            if score > state.best_val_acc or not state.best_params:
                state.best_val_acc = score
                state.best_epoch = state.epoch
                state.best_params = {k: v.copy() for k, v in state.net.params.items()}
                state.best_buffers = {k: v.copy() for k, v in state.net.buffers.items()}
        else:
            row["val_acc"] = float("nan")
        state.history.append(row)
        log.info("epoch %d: ce=%.4f embed=%.4f total=%.4f val_acc=%.4f",
                 state.epoch, row["ce"], row["embed"], row["total"], row["val_acc"])
        if on_epoch is not None:
            on_epoch(state)
    return state


def split_arrays(manifest: DatasetManifest):
    tr = manifest.subset("train")
    va = manifest.subset("val")
    return tr.arrays(), va.arrays()


def train(manifest: DatasetManifest, spec: NetworkSpec, cfg: TrainConfig,
          state: Optional[TrainState] = None, on_epoch=None):
    """Train on the manifest's train split, selecting by val-split accuracy.

    Returns (best network, history, final TrainState).
    """
    (train_x, train_y), (val_x, val_y) = split_arrays(manifest)
    if len(train_y) == 0:
        raise ValueError("manifest has no train records")
    state = init_state(spec, cfg) if state is None else state
    run_epochs(state, train_x, train_y, val_x, val_y, cfg, on_epoch)
    return state.best_network(), state.history, state


# ---------------------------------------------------------------- persistence

def state_to_checkpoint(state: TrainState, cfg: TrainConfig) -> Checkpoint:
    spec = state.net.spec
    t = {}
    for k, v in state.net.params.items():
        t[f"param/{k}"] = v
        t[f"velocity/{k}"] = state.velocity[k]
    for k, v in state.net.buffers.items():
        t[f"buffer/{k}"] = v
    for k, v in state.best_params.items():
        t[f"best_param/{k}"] = v
    for k, v in state.best_buffers.items():
        t[f"best_buffer/{k}"] = v
    if state.bank is not None:
        t["center/centers"] = state.bank.centers
        t["center/initialized"] = state.bank.initialized.astype(np.uint8)
    meta = {
        "spec": spec.to_dict(),
        "train": cfg.to_dict(),
        "config_hash": run_hash(spec, cfg),
        "epoch": state.epoch,
        "history": state.history,
        "best_epoch": state.best_epoch,
        "best_val_acc": state.best_val_acc,
        "dtype": str(state.net.dtype),
        "rng": {"seed": cfg.seed, "next_epoch": state.epoch,
                "bit_generator": _jsonable(epoch_rng(cfg, state.epoch).bit_generator.state)},
    }
    return Checkpoint(meta, t)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _check_group(ckpt: Checkpoint, prefix: str, expected: Dict[str, tuple]):
    got = ckpt.group(prefix)
    for name, shape in expected.items():
        if name not in got:
            raise CheckpointError(f"checkpoint lacks tensor {prefix}/{name}")
        if got[name].shape != tuple(shape):
            raise CheckpointError(
                f"tensor {prefix}/{name} has shape {got[name].shape}, spec expects {tuple(shape)}")
    return {k: got[k].copy() for k in expected}


def state_from_checkpoint(ckpt: Checkpoint, spec: Optional[NetworkSpec] = None) -> TrainState:
    stored = NetworkSpec.from_dict(ckpt.meta["spec"])
    spec = stored if spec is None else spec
    dtype = np.dtype(ckpt.meta.get("dtype", "float64"))
    pshapes = Network.parameter_shapes(spec)
    bshapes = Network.buffer_shapes(spec)
    params = _check_group(ckpt, "param", pshapes)
    buffers = _check_group(ckpt, "buffer", bshapes)
    velocity = _check_group(ckpt, "velocity", pshapes)
    best_p = _check_group(ckpt, "best_param", pshapes) if ckpt.group("best_param") else {}
    best_b = _check_group(ckpt, "best_buffer", bshapes) if best_p else {}
    bank = None
    if "center/centers" in ckpt.tensors:
        bank = CenterBank(ckpt.tensors["center/centers"].copy(),
                          ckpt.tensors["center/initialized"].astype(bool))
    net = Network(spec, params, buffers, dtype)
    m = ckpt.meta
    return TrainState(net, bank, velocity, int(m["epoch"]), list(m["history"]),
                      int(m["best_epoch"]), float(m["best_val_acc"]), best_p, best_b)


def save_state(path, state: TrainState, cfg: TrainConfig, extra_meta: Optional[dict] = None) -> None:
    ckpt = state_to_checkpoint(state, cfg)
    ckpt.meta.update(extra_meta or {})
    save_checkpoint(path, ckpt)


def load_state(path, spec: Optional[NetworkSpec] = None, cfg: Optional[TrainConfig] = None) -> TrainState:
    """Load a training state; with ``cfg`` the stored config hash must match."""
    ckpt = load_checkpoint(path)
    state = state_from_checkpoint(ckpt, spec)
    if cfg is not None and ckpt.meta.get("config_hash") != run_hash(state.net.spec, cfg):
        raise CheckpointError(f"{path}: config hash mismatch (checkpoint was written by a different run config)")
    return state


def load_model(path) -> Network:
    """The best-validation network stored in a training checkpoint."""
    net = state_from_checkpoint(load_checkpoint(path)).best_network()
    net.train_mode = False
    return net


def write_history_csv(path, history: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_HEADER[1:]])
