"""Layer kernels, shape inference, and the convolutional classifier.

All image tensors are laid out B x C x H x W. Convolutions are valid
cross-correlations with stride 1; pooling is 2x2 max with stride 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TAPS = ("feature", "classifier", "probability")


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    has_pool: bool = True
    has_batchnorm: bool = True

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int
    conv_blocks: Tuple[ConvSpec, ...]
    feature_dim: int
    num_classes: int
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(self.conv_blocks))
        prev = self.in_channels
        for i, blk in enumerate(self.conv_blocks):
            if blk.in_channels != prev:
                raise ValueError(
                    f"block {i}: in_channels {blk.in_channels} != previous out_channels {prev}")
            prev = blk.out_channels
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ValueError("feature_dim must be >= 1 and num_classes >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvSpec(**b) for b in d["conv_blocks"])
        return cls(**d)

    @classmethod
    def from_channels(cls, input_size: int, kernels, channels, pools, feature_dim: int,
                      num_classes: int, batchnorm: bool = True) -> "NetworkSpec":
        blocks, prev = [], 1
        for k, c, p in zip(kernels, channels, pools):
            blocks.append(ConvSpec(int(k), prev, int(c), bool(p), batchnorm))
            prev = int(c)
        return cls(int(input_size), tuple(blocks), int(feature_dim), int(num_classes))


def paper_network_spec(num_classes: int = 10) -> NetworkSpec:
    """The 128x128 five-block architecture used for the 10-class SAR task."""
    return NetworkSpec.from_channels(
        128, kernels=(5, 5, 6, 5, 3), channels=(16, 32, 64, 128, 128),
        pools=(True, True, True, False, True), feature_dim=256, num_classes=num_classes)


def desk_network_spec(num_classes: int = 4, input_size: int = 32) -> NetworkSpec:
    """Small net for 32x32 synthetic chips: 28->14, 12->6, 4->2."""
    return NetworkSpec.from_channels(
        input_size, kernels=(5, 3, 3), channels=(8, 16, 32),
        pools=(True, True, True), feature_dim=64, num_classes=num_classes)


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, int, int]]:
    """Per-block output sizes as (H, W, C)."""
    size = spec.input_size
    shapes = []
    for i, blk in enumerate(spec.conv_blocks):
        size = size - blk.kernel + 1
        if size < 1:
            raise ShapeError(f"block {i}: kernel {blk.kernel} larger than its input")
        if blk.has_pool:
            size //= 2
            if size < 1:
                raise ShapeError(f"block {i}: pooling reduces spatial size below 1")
        shapes.append((size, size, blk.out_channels))
    return shapes


# ---------------------------------------------------------------- kernels

def _im2col(x: np.ndarray, k: int) -> Tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, kernels, biases):
    """Returns (y, cache). kernels: Cout x Cin x k x k."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B x C x H x W input, got {x.shape}")
    cout, cin, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernels expect {cin}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} smaller than kernel {k}")
    cols, ho, wo = _im2col(x, k)
    y = cols @ kernels.reshape(cout, -1).T + biases
    y = y.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, cols, kernels)


def conv2d_backward(cache, dy, need_input_grad: bool = True):
    """Returns (grad_x, grad_kernels, grad_biases); grad_x is None when not needed."""
    x_shape, cols, kernels = cache
    b, cin, h, w = x_shape
    cout, _, k, _ = kernels.shape
    ho, wo = h - k + 1, w - k + 1
    if dy.shape != (b, cout, ho, wo):
        raise ShapeError(f"upstream gradient {dy.shape} != conv output {(b, cout, ho, wo)}")
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy_mat.T @ cols).reshape(kernels.shape)
    db = dy_mat.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (dy_mat @ kernels.reshape(cout, -1)).reshape(b, ho, wo, cin, k, k)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # B,Cin,k,k,Ho,Wo
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
    return dx, dw, db


def batchnorm_forward(x, gain, shift, running_mean, running_var, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization over (B, H, W).

    In train mode ``running_mean``/``running_var`` are updated in place.
    Returns (y, cache).
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if train:
        n = x.size // x.shape[1]
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gain.reshape(bshape) + shift.reshape(bshape)
    return y, (xhat, inv_std, gain, train, axes, bshape)


def batchnorm_backward(cache, dy):
    xhat, inv_std, gain, train, axes, bshape = cache
    dgain = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * gain.reshape(bshape)
    if not train:
        return dxhat * inv_std.reshape(bshape), dgain, dshift
    m = dy.size // dy.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
    return dx, dgain, dshift


def maxpool2x2_forward(x):
    """2x2/2 max pool. Odd trailing rows/columns are dropped."""
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"cannot pool a {h}x{w} map")
    win = x[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1)  # first occurrence in row-major window order
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2x2_backward(cache, dy):
    x_shape, idx = cache
    b, c, h, w = x_shape
    ho, wo = h // 2, w // 2
    if dy.shape != (b, c, ho, wo):
        raise ShapeError(f"upstream gradient {dy.shape} != pool output {(b, c, ho, wo)}")
    win = np.zeros((b, c, ho, wo, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    win = win.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :2 * ho, :2 * wo] = win
    return dx


def dense_forward(x, weight, bias):
    """y = x W^T + b with W: m x n."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def dense_backward(cache, dy):
    x, weight = cache
    if dy.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"upstream gradient {dy.shape} != dense output {(x.shape[0], weight.shape[0])}")
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(mask, dy):
    return dy * mask


def softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, dp):
    """Vector-Jacobian product of row-wise softmax."""
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- network

@dataclass
class ForwardTrace:
    feature: np.ndarray
    classifier: np.ndarray
    probability: np.ndarray
    caches: list = field(default_factory=list, repr=False)
    activations: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def tap(self, name: str) -> np.ndarray:
        if name not in TAPS:
            raise ValueError(f"unknown tap {name!r}; expected one of {TAPS}")
        return getattr(self, name)


class Network:
    """Parameters, batchnorm buffers and forward/backward of the classifier."""

    def __init__(self, spec: NetworkSpec, params: Dict[str, np.ndarray],
                 buffers: Dict[str, np.ndarray], dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = params
        self.buffers = buffers
        self.train_mode = True
        self.check_parameters()

    # -- construction
    @staticmethod
    def parameter_shapes(spec: NetworkSpec) -> Dict[str, tuple]:
        shapes: Dict[str, tuple] = {}
        for i, blk in enumerate(spec.conv_blocks):
            shapes[f"conv{i}.weight"] = (blk.out_channels, blk.in_channels, blk.kernel, blk.kernel)
            shapes[f"conv{i}.bias"] = (blk.out_channels,)
            if blk.has_batchnorm:
                shapes[f"bn{i}.gain"] = (blk.out_channels,)
                shapes[f"bn{i}.shift"] = (blk.out_channels,)
        h, w, c = infer_shapes(spec)[-1] if spec.conv_blocks else (spec.input_size, spec.input_size, spec.in_channels)
        flat = h * w * c
        shapes["fc.weight"] = (spec.feature_dim, flat)
        shapes["fc.bias"] = (spec.feature_dim,)
        shapes["out.weight"] = (spec.num_classes, spec.feature_dim)
        shapes["out.bias"] = (spec.num_classes,)
        return shapes

    @staticmethod
    def buffer_shapes(spec: NetworkSpec) -> Dict[str, tuple]:
        shapes = {}
        for i, blk in enumerate(spec.conv_blocks):
            if blk.has_batchnorm:
                shapes[f"bn{i}.running_mean"] = (blk.out_channels,)
                shapes[f"bn{i}.running_var"] = (blk.out_channels,)
        return shapes

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> "Network":
        params = {}
        for name, shape in cls.parameter_shapes(spec).items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape, dtype=dtype)
            elif name.endswith(".shift"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                layer = name.split(".")[0]
                wshape = cls.parameter_shapes(spec)[layer + ".weight"]
                fan_in = int(np.prod(wshape[1:]))
                bound = np.sqrt(1.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        buffers = {}
        for name, shape in cls.buffer_shapes(spec).items():
            fill = 1.0 if name.endswith("running_var") else 0.0
            buffers[name] = np.full(shape, fill, dtype=dtype)
        return cls(spec, params, buffers, dtype)

    @classmethod
    def zeros(cls, spec: NetworkSpec, dtype=np.float64) -> "Network":
        net = cls.initialize(spec, np.random.default_rng(0), dtype)
        for v in net.params.values():
            v[...] = 0
        return net

    def check_parameters(self) -> None:
        for group, expected in ((self.params, self.parameter_shapes(self.spec)),
                                (self.buffers, self.buffer_shapes(self.spec))):
            if set(group) != set(expected):
                missing = sorted(set(expected) - set(group))
                extra = sorted(set(group) - set(expected))
                raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
            for name, shape in expected.items():
                if group[name].shape != shape:
                    raise ShapeError(f"{name}: expected shape {shape}, got {group[name].shape}")

    def copy(self) -> "Network":
        net = Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                      {k: v.copy() for k, v in self.buffers.items()}, self.dtype)
        net.train_mode = self.train_mode
        return net

    # -- passes
    def forward(self, x: np.ndarray, train: Optional[bool] = None) -> ForwardTrace:
        train = self.train_mode if train is None else train
        spec = self.spec
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (spec.in_channels, spec.input_size, spec.input_size):
            raise ShapeError(
                f"input {x.shape} does not match spec ({spec.in_channels}, {spec.input_size}, {spec.input_size})")
        h = np.ascontiguousarray(x, dtype=self.dtype)
        p = self.params
        caches = []
        acts = {}
        for i, blk in enumerate(spec.conv_blocks):
            h, c_conv = conv2d_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            c_bn = None
            if blk.has_batchnorm:
                h, c_bn = batchnorm_forward(
                    h, p[f"bn{i}.gain"], p[f"bn{i}.shift"],
                    self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"], train)
            h, c_relu = relu_forward(h)
            c_pool = None
            if blk.has_pool:
                h, c_pool = maxpool2x2_forward(h)
            caches.append((c_conv, c_bn, c_relu, c_pool))
            acts[f"block{i}"] = h
        flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        z, c_fc = dense_forward(h, p["fc.weight"], p["fc.bias"])
        feature, c_frelu = relu_forward(z)
        logits, c_out = dense_forward(feature, p["out.weight"], p["out.bias"])
        prob = softmax(logits)
        caches.append((flat_shape, c_fc, c_frelu, c_out))
        return ForwardTrace(feature, logits, prob, caches, acts)

    def backward(self, trace: ForwardTrace, d_classifier: np.ndarray,
                 d_feature: Optional[np.ndarray] = None,
                 d_probability: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Gradients of all parameters given upstream gradients at the taps."""
        if d_classifier.shape != trace.classifier.shape:
            raise ShapeError(f"classifier gradient {d_classifier.shape} != tap {trace.classifier.shape}")
        dz = d_classifier
        if d_probability is not None:
            dz = dz + softmax_backward(trace.probability, d_probability)
        grads: Dict[str, np.ndarray] = {}
        flat_shape, c_fc, c_frelu, c_out = trace.caches[-1]
        df, grads["out.weight"], grads["out.bias"] = dense_backward(c_out, dz)
        if d_feature is not None:
            df = df + d_feature
        dh, grads["fc.weight"], grads["fc.bias"] = dense_backward(c_fc, relu_backward(c_frelu, df))
        dh = dh.reshape(flat_shape)
        for i in reversed(range(len(self.spec.conv_blocks))):
            c_conv, c_bn, c_relu, c_pool = trace.caches[i]
            if c_pool is not None:
                dh = maxpool2x2_backward(c_pool, dh)
            dh = relu_backward(c_relu, dh)
            if c_bn is not None:
                dh, grads[f"bn{i}.gain"], grads[f"bn{i}.shift"] = batchnorm_backward(c_bn, dh)
            dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv2d_backward(
                c_conv, dh, need_input_grad=i > 0)
        return {name: grads[name] for name in self.params}

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.embed(x, "probability", batch_size)

    def embed(self, x: np.ndarray, tap: str, batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(x), batch_size):
            out.append(self.forward(x[s:s + batch_size], train=False).tap(tap))
        return np.concatenate(out, axis=0)

    def weight_names(self) -> List[str]:
        """Names subject to weight decay: conv kernels and dense matrices."""
        return [n for n in self.params if n.endswith(".weight")]
