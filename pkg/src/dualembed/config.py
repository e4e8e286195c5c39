"""Run configuration read from an INI-style file.

Sections mirror the lifecycle: ``[dataset]``, ``[model]``, ``[loss]``,
``[train]`` and ``[output]``. Every key is optional; command-line flags
override file values, which override the defaults below.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .data.synthetic import SyntheticConfig
from .layers import TAPS, NetworkSpec
from .losses import EMBEDDING_KINDS, LossConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    path: Optional[str] = None
    generator: SyntheticConfig = field(default_factory=SyntheticConfig)
    copies: int = 4
    max_shift: Optional[int] = None
    sqrt_preprocess: Optional[bool] = None
    unseen_variants: Optional[Tuple[str, ...]] = None
    classes: Optional[Tuple[str, ...]] = None


@dataclass(frozen=True)
class ModelSection:
    kernels: Tuple[int, ...] = (5, 3, 3)
    channels: Tuple[int, ...] = (8, 16, 32)
    pools: Tuple[bool, ...] = (True, True, True)
    feature_dim: int = 64
    batchnorm: bool = True

    def network_spec(self, input_size: int, num_classes: int) -> NetworkSpec:
        if not len(self.kernels) == len(self.channels) == len(self.pools):
            raise ConfigError("model.kernels, model.channels and model.pools must have equal length")
        return NetworkSpec.from_channels(input_size, self.kernels, self.channels, self.pools,
                                         self.feature_dim, num_classes, self.batchnorm)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Optional[str] = None

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def validate(self) -> "RunConfig":
        if self.loss.embedding_kind == "contrastive" and self.train.batch_size % 2:
            raise ConfigError("contrastive loss requires an even train.batch_size")
        if self.loss.placement not in TAPS:
            raise ConfigError(f"loss.placement must be one of {TAPS}")
        if self.dataset.copies < 0:
            raise ConfigError("dataset.copies must be >= 0")
        return self


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _list(s: str, conv=str) -> tuple:
    return tuple(conv(x.strip()) for x in s.split(",") if x.strip())


def _convert(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            return _bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


_GEN_KEYS = {f.name for f in fields(SyntheticConfig)}
_LOSS_KEYS = {"kind": "embedding_kind", "placement": "placement", "lambda": "lam", "m_s": "m_s",
              "m_d": "m_d", "center_rate": "center_rate", "weight_decay": "weight_decay"}


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"dataset", "model", "loss", "train", "output"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    cfg = RunConfig()
    ds = cfg.dataset
    gen = ds.generator
    if cp.has_section("dataset"):
        s = cp["dataset"]
        gen_kw, ds_kw = {}, {}
        for key, val in s.items():
            if key in _GEN_KEYS:
                gen_kw[key] = _convert(val, getattr(gen, key), f"dataset.{key}")
            elif key == "path":
                ds_kw["path"] = val or None
            elif key == "copies":
                ds_kw["copies"] = int(val)
            elif key == "max_shift":
                ds_kw["max_shift"] = int(val) if val else None
            elif key == "sqrt_preprocess":
                ds_kw["sqrt_preprocess"] = _bool(val)
            elif key == "unseen":
                ds_kw["unseen_variants"] = _list(val)
            elif key == "classes":
                ds_kw["classes"] = _list(val) or None
            else:
                raise ConfigError(f"unknown key dataset.{key}")
        ds = replace(ds, generator=replace(gen, **gen_kw), **ds_kw)
    model = cfg.model
    if cp.has_section("model"):
        s = cp["model"]
        kw = {}
        for key, val in s.items():
            if key == "kernels":
                kw[key] = _list(val, int)
            elif key == "channels":
                kw[key] = _list(val, int)
            elif key == "pools":
                kw[key] = _list(val, _bool)
            elif key == "feature_dim":
                kw[key] = int(val)
            elif key == "batchnorm":
                kw[key] = _bool(val)
            else:
                raise ConfigError(f"unknown key model.{key}")
        model = replace(model, **kw)
    loss_kw = {}
    if cp.has_section("loss"):
        for key, val in cp["loss"].items():
            if key not in _LOSS_KEYS:
                raise ConfigError(f"unknown key loss.{key}")
            name = _LOSS_KEYS[key]
            loss_kw[name] = val if name in ("embedding_kind", "placement") else float(val)
    train_kw = {}
    if cp.has_section("train"):
        defaults = TrainConfig()
        for key, val in cp["train"].items():
            if key == "loss" or not hasattr(defaults, key):
                raise ConfigError(f"unknown key train.{key}")
            train_kw[key] = _convert(val, getattr(defaults, key), f"train.{key}")
    out_dir = None
    if cp.has_section("output"):
        for key, val in cp["output"].items():
            if key != "dir":
                raise ConfigError(f"unknown key output.{key}")
            out_dir = val
    try:
        loss = LossConfig(**loss_kw)
        train = TrainConfig(loss=loss, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(ds, model, train, out_dir).validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def with_overrides(cfg: RunConfig, *, seed=None, lam=None, placement=None, embedding=None,
                   m_d=None, copies=None, epochs=None, data=None, out=None) -> RunConfig:
    """Apply command-line overrides (flag > file > default)."""
    loss_kw = {}
    if embedding is not None:
        if embedding not in EMBEDDING_KINDS:
            raise ConfigError(f"--embedding must be one of {EMBEDDING_KINDS}")
        loss_kw["embedding_kind"] = embedding
        if lam is None and embedding != cfg.loss.embedding_kind:
            loss_kw["lam"] = None  # take the new kind's default weight
    if lam is not None:
        loss_kw["lam"] = lam
    if placement is not None:
        loss_kw["placement"] = placement
    if m_d is not None:
        loss_kw["m_d"] = m_d
    try:
        loss = replace(cfg.loss, **loss_kw) if loss_kw else cfg.loss
        train_kw = {"loss": loss}
        if seed is not None:
            train_kw["seed"] = seed
        if epochs is not None:
            train_kw["epochs"] = epochs
        train = replace(cfg.train, **train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = cfg.dataset
    if copies is not None:
        ds = replace(ds, copies=copies)
    if data is not None:
        ds = replace(ds, path=data)
    if seed is not None:
        ds = replace(ds, generator=replace(ds.generator, seed=seed))
    return replace(cfg, dataset=ds, train=train, out_dir=out or cfg.out_dir).validate()


def render_config(cfg: RunConfig) -> str:
    """Effective configuration in the same INI layout."""
    g = cfg.dataset.generator
    ds = cfg.dataset
    lines = ["[dataset]"]
    if ds.path:
        lines.append(f"path = {ds.path}")
    for k, v in asdict(g).items():
        lines.append(f"{k} = {v}")
    lines.append(f"copies = {ds.copies}")
    if ds.max_shift is not None:
        lines.append(f"max_shift = {ds.max_shift}")
    if ds.sqrt_preprocess is not None:
        lines.append(f"sqrt_preprocess = {ds.sqrt_preprocess}")
    if ds.unseen_variants is not None:
        lines.append(f"unseen = {','.join(ds.unseen_variants)}")
    if ds.classes:
        lines.append(f"classes = {','.join(ds.classes)}")
    m = cfg.model
    lines += ["", "[model]", f"kernels = {','.join(map(str, m.kernels))}",
              f"channels = {','.join(map(str, m.channels))}",
              f"pools = {','.join(str(p).lower() for p in m.pools)}",
              f"feature_dim = {m.feature_dim}", f"batchnorm = {str(m.batchnorm).lower()}"]
    l = cfg.loss
    lines += ["", "[loss]", f"kind = {l.embedding_kind}", f"placement = {l.placement}",
              f"lambda = {l.lam!r}", f"m_s = {l.m_s!r}", f"m_d = {l.m_d!r}",
              f"center_rate = {l.center_rate!r}", f"weight_decay = {l.weight_decay!r}"]
    lines += ["", "[train]"]
    for k, v in asdict(cfg.train).items():
        if k != "loss":
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    if cfg.out_dir:
        lines += ["", "[output]", f"dir = {cfg.out_dir}"]
    return "\n".join(lines) + "\n"
