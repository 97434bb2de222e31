"""Neural layers for the ResNet topology: 2-D convolution, batch norm,
linear layers, the residual basic block, and temporal statistics pooling.

Feature maps are (batch, channels, freq, time). All 3x3 convolutions use
padding 1 so stride-1 layers preserve spatial dims and stride-2 layers halve
them with floor division, which is what keeps the
full-scale stack's per-stage output sizes on their intended grid.
"""

from __future__ import annotations

import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, cat

STATS_EPS = 1e-8


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent, name-keyed random stream.

    Each layer draws from its own stream so that adding or removing SE units
    elsewhere in the network cannot shift the initialization of unrelated
    layers. This is what makes ablation cells share backbone weights.
    """
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())]))


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """Dense layer y = x W^T + b."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            _uniform_fan_in(rng, in_features, (out_features, in_features), dtype),
            requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear expects input dim {self.in_features}, got {x.shape}")
        out = x @ self.weight.transpose()
        if self.bias is not None:
            out = out + self.bias.reshape(1, self.out_features)
        return out

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def _im2col(xp: np.ndarray, kh: int, kw: int, sf: int, st: int) -> tuple[np.ndarray, int, int]:
    # xp: padded input (b, c, fp, tp) -> cols (c*kh*kw, b*fo*to)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sf, ::st]
    b, c, fo, to = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * fo * to)
    return np.ascontiguousarray(cols), fo, to


def _col2im(dcols: np.ndarray, xshape: tuple, kh: int, kw: int, sf: int, st: int,
            pf: int, pt: int, fo: int, to: int) -> np.ndarray:
    b, c, f, t = xshape
    dxp = np.zeros((b, c, f + 2 * pf, t + 2 * pt), dtype=dcols.dtype)
    dc = dcols.reshape(c, kh, kw, b, fo, to)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sf * fo:sf, j:j + st * to:st] += dc[:, i, j].transpose(1, 0, 2, 3)
    if pf or pt:
        return dxp[:, :, pf:pf + f, pt:pt + t]
    return dxp


class Conv2d:
    """3x3 (by default) cross-correlation over (freq, time), via im2col + GEMM.

    The im2col buffer is kept for the weight-gradient GEMM whenever the
    weights are on the tape; grad-free forward passes drop it immediately.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: tuple[int, int] = (1, 1), padding: tuple[int, int] | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding) if padding is not None else (kernel // 2, kernel // 2)
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _uniform_fan_in(rng, fan_in, (out_channels, in_channels, kernel, kernel), dtype),
            requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects (b, c, f, t), got {x.shape}")
        b, cin, f, t = x.shape
        if cin != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got {cin}")
        kh = kw = self.kernel
        sf, st = self.stride
        pf, pt = self.padding
        fo = (f + 2 * pf - kh) // sf + 1
        to = (t + 2 * pt - kw) // st + 1
        if fo <= 0 or to <= 0:
            raise ShapeError(
                f"conv2d output would be empty for input {x.shape} with kernel {kh}x{kw}")

        weight, bias = self.weight, self.bias
        xp = np.pad(x.data, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else x.data
        cols, fo2, to2 = _im2col(xp, kh, kw, sf, st)
        assert (fo2, to2) == (fo, to)
        wmat = weight.data.reshape(self.out_channels, cin * kh * kw)
        out = (wmat @ cols).reshape(self.out_channels, b, fo, to).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
        if bias is not None:
            out += bias.data.reshape(1, self.out_channels, 1, 1)

        parents = (x, weight) + ((bias,) if bias is not None else ())
        xshape = x.shape
        needs_cols = weight.requires_grad
        saved_cols = cols if needs_cols else None

        def backward(g):
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(self.out_channels, b * fo * to)
            if bias is not None and bias.requires_grad:
                bias._accum_new(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                weight._accum_new((gmat @ saved_cols.T).reshape(weight.shape))
            if x.requires_grad:
                dcols = wmat.T @ gmat
                x._accum_new(_col2im(dcols, xshape, kh, kw, sf, st, pf, pt, fo, to))

        return Tensor._from_op(out, parents, backward)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class BatchNorm2d:
    """Per-channel batch normalization over (batch, freq, time).

    Train mode normalizes with batch statistics (population variance) and
    updates the running estimates; eval mode uses the running estimates,
    which start at mean 0 / var 1 so eval works before any training step.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"batchnorm expects (b, {self.channels}, f, t), got {x.shape}")
        c = self.channels
        if train:
            return self._forward_train(x)
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        rm = Tensor(self.running_mean.reshape(1, c, 1, 1), dtype=x.dtype)
        rstd = Tensor(np.sqrt(self.running_var.reshape(1, c, 1, 1) + self.eps), dtype=x.dtype)
        return gamma * ((x - rm) / rstd) + beta

    def _forward_train(self, x: Tensor) -> Tensor:
        # fused primitive: one normalized map kept for the closed-form backward
        c = self.channels
        gamma, beta = self.gamma, self.beta
        axes = (0, 2, 3)
        n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = np.square(x.data - mu).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mu) * inv_std
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean
                             + m * mu.reshape(c).astype(self.running_mean.dtype))
        self.running_var = ((1 - m) * self.running_var
                            + m * var.reshape(c).astype(self.running_var.dtype))

        def backward(g):
            dbeta = g.sum(axis=axes, keepdims=True)
            dgamma = (g * xhat).sum(axis=axes, keepdims=True)
            if beta.requires_grad:
                beta._accum_new(dbeta.reshape(c))
            if gamma.requires_grad:
                gamma._accum_new(dgamma.reshape(c))
            if x.requires_grad:
                coef = gamma.data.reshape(1, c, 1, 1) * inv_std
                x._accum_new(coef * (g - (dbeta + xhat * dgamma) / n))

        return Tensor._from_op(out, (x, gamma, beta), backward)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.running_mean = value.astype(self.running_mean.dtype)
        elif name == "running_var":
            self.running_var = value.astype(self.running_var.dtype)
        else:
            raise KeyError(name)


class BasicBlock:
    """Two 3x3 convs with batch norm, plus the skip path.

    When stride or width changes, the skip carries a stride-matched 1x1
    convolution + batch norm. SE wiring wraps around ``residual`` and
    ``shortcut``; the bare block applies none.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 name: str, seed: int, dtype=np.float32):
        self.name = name
        self.conv1 = Conv2d(in_channels, out_channels, stride=(stride, stride),
                            rng=rng_for(seed, f"{name}.conv1"), dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, stride=(1, 1),
                            rng=rng_for(seed, f"{name}.conv2"), dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.down_conv = Conv2d(in_channels, out_channels, kernel=1,
                                    stride=(stride, stride), padding=(0, 0), bias=False,
                                    rng=rng_for(seed, f"{name}.down"), dtype=dtype)
            self.down_bn = BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def residual(self, x: Tensor, train: bool) -> Tensor:
        h = self.bn1.forward(self.conv1.forward(x), train).relu()
        return self.bn2.forward(self.conv2.forward(h), train)

    def shortcut(self, x: Tensor, train: bool) -> Tensor:
        if self.down_conv is None:
            return x
        return self.down_bn.forward(self.down_conv.forward(x), train)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return (self.residual(x, train) + self.shortcut(x, train)).relu()

    def named_parameters(self, prefix: str):
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")
        yield from self.bn2.named_parameters(f"{prefix}.bn2")
        if self.down_conv is not None:
            yield from self.down_conv.named_parameters(f"{prefix}.down")
            yield from self.down_bn.named_parameters(f"{prefix}.down_bn")

    def named_buffers(self, prefix: str):
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")
        if self.down_bn is not None:
            yield from self.down_bn.named_buffers(f"{prefix}.down_bn")


def temporal_stats_pool(x: Tensor, mode: str = "mean") -> Tensor:
    """Pool a (b, c, f, t) map over time into (b, c*f) or (b, 2*c*f).

    Mean-only is the default; the full-scale stack's flatten width
    (2048 = 8 * 256) has no room for a std half. mean_std doubles the
    output. Std is population std with an epsilon inside the sqrt.
    """
    if x.ndim != 4:
        raise ShapeError(f"temporal_stats_pool expects (b, c, f, t), got {x.shape}")
    b, c, f, t = x.shape
    if t < 1:
        raise ShapeError("temporal_stats_pool: empty time axis")
    mu = x.mean(axis=3)
    flat_mu = mu.reshape(b, c * f)
    if mode == "mean":
        return flat_mu
    if mode != "mean_std":
        raise ValueError(f"unknown pooling mode {mode!r}")
    if t >= 2:
        centered = x - mu.reshape(b, c, f, 1)
        var = (centered * centered).mean(axis=3)
        std = (var + STATS_EPS) ** 0.5
    else:
        std = mu * 0.0
    return cat([flat_mu, std.reshape(b, c * f)], axis=1)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                     stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Direct six-nested-loop convolution, the oracle for the im2col path."""
    b, cin, f, t = x.shape
    cout, cin_w, kh, kw = weight.shape
    assert cin == cin_w
    sf, st = stride
    pf, pt = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    fo = (f + 2 * pf - kh) // sf + 1
    to = (t + 2 * pt - kw) // st + 1
    out = np.zeros((b, cout, fo, to), dtype=np.float64)
    for n in range(b):
        for co in range(cout):
            for i in range(fo):
                for j in range(to):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * sf + u, j * st + v] * weight[co, ci, u, v]
                    out[n, co, i, j] = acc
            if bias is not None:
                out[n, co] += bias[co]
    return out.astype(x.dtype)
