"""3D tensor kernels: valid convolution, PReLU, softmax and He initialization.

Feature maps are channel-first arrays. A single map is ``(C, D, H, W)``; a
batch inserts the sample axis after the channels, ``(C, N, D, H, W)``, so that
every convolution reduces to one GEMM whose output is already channel-first.
All kernels work on both layouts: axis 0 is channels, the last three axes are
spatial.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvParams",
    "PReluParams",
    "Gradients",
    "conv3d_forward",
    "conv3d_backward",
    "prelu_forward",
    "prelu_backward",
    "softmax",
    "log_softmax",
    "he_init",
    "conv_output_shape",
    "PRELU_INIT",
]

PRELU_INIT = 0.25

# upper bound on im2col buffer elements before the batch axis is chunked
_IM2COL_BUDGET = 24_000_000


@dataclass
class ConvParams:
    """Weights ``(K, C, kd, kh, kw)`` and per-output-channel bias ``(K,)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 5:
            raise ValueError(f"conv weights must be 5D, got shape {self.weights.shape}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel dims must be odd and >= 1, got {self.kernel}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weights.shape[2:])


@dataclass
class PReluParams:
    slopes: np.ndarray

    def __post_init__(self):
        self.slopes = np.asarray(self.slopes, dtype=np.float64).reshape(-1)

    @classmethod
    def initial(cls, channels: int) -> "PReluParams":
        return cls(np.full(channels, PRELU_INIT))


@dataclass
class Gradients:
    """Gradient carrier. Fields not produced by a given backward stay ``None``."""

    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    slopes: np.ndarray | None = None
    input: np.ndarray | None = None


def conv_output_shape(spatial, kernel) -> tuple[int, ...]:
    return tuple(int(s) - int(k) + 1 for s, k in zip(spatial, kernel))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation without bias: ``x (C, *B, S3)``, ``w (K, C, k3)``."""
    K, C = w.shape[:2]
    kernel = w.shape[2:]
    out_sp = conv_output_shape(x.shape[-3:], kernel)
    batch = x.shape[1:-3]
    w2 = w.reshape(K, -1)
    if kernel == (1, 1, 1):
        return (w2 @ x.reshape(C, -1)).reshape((K,) + batch + out_sp)

    ksize = kernel[0] * kernel[1] * kernel[2]
    per_sample = C * ksize * int(np.prod(out_sp))
    n = int(np.prod(batch)) if batch else 1
    xb = x.reshape((C, n) + x.shape[-3:])
    out = np.empty((K, n) + out_sp, dtype=np.result_type(x, w))
    step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        v = sliding_window_view(xb[:, i0:i1], kernel, axis=(-3, -2, -1))
        # (C, n, Do, Ho, Wo, kd, kh, kw) -> (C, kd, kh, kw, n, Do, Ho, Wo)
        cols = v.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(C * ksize, -1)
        out[:, i0:i1] = (w2 @ cols).reshape((K, i1 - i0) + out_sp)
    return out.reshape((K,) + batch + out_sp)


def _col2im_grad(w: np.ndarray, grad_out: np.ndarray, in_shape) -> np.ndarray:
    """Input gradient: GEMM to column space, then scatter-add every kernel tap."""
    K, C = w.shape[:2]
    kd, kh, kw = w.shape[2:]
    out_sp = grad_out.shape[-3:]
    Do, Ho, Wo = out_sp
    n = int(np.prod(in_shape[1:-3])) if len(in_shape) == 5 else 1
    gb = grad_out.reshape((K, n) + out_sp)
    dx = np.zeros((C, n) + tuple(in_shape[-3:]))
    wt = w.reshape(K, C * kd * kh * kw).T
    per_sample = C * kd * kh * kw * int(np.prod(out_sp))
    step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        dcols = (wt @ gb[:, i0:i1].reshape(K, -1)).reshape((C, kd, kh, kw, i1 - i0) + out_sp)
        dxc = dx[:, i0:i1]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    dxc[:, :, a:a + Do, b:b + Ho, c:c + Wo] += dcols[:, a, b, c]
    return dx.reshape(in_shape)


def _check_conv_input(x: np.ndarray, p: ConvParams) -> None:
    if x.ndim not in (4, 5):
        raise ValueError(f"feature map must be 4D or 5D (channel-first), got shape {x.shape}")
    if x.shape[0] != p.in_channels:
        raise ValueError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel expects {p.in_channels}"
        )
    if any(s < k for s, k in zip(x.shape[-3:], p.kernel)):
        raise ValueError(f"input spatial dims {x.shape[-3:]} smaller than kernel {p.kernel}")


def conv3d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Valid, unit-stride 3D cross-correlation plus bias."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv_input(x, p)
    y = _correlate(x, p.weights)
    y += _channel_view(p.bias, y.ndim)
    return y


def conv3d_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray, input_grad: bool = True
) -> Gradients:
    """Gradients of :func:`conv3d_forward` w.r.t. weights, bias and (optionally) input."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_conv_input(x, p)
    expected = (p.out_channels,) + x.shape[1:-3] + conv_output_shape(x.shape[-3:], p.kernel)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")

    K, C = p.out_channels, p.in_channels
    kernel = p.kernel
    g2 = grad_out.reshape(K, -1)
    db = g2.sum(axis=1)

    if kernel == (1, 1, 1):
        dw = (g2 @ x.reshape(C, -1).T).reshape(p.weights.shape)
    else:
        ksize = int(np.prod(kernel))
        n = int(np.prod(x.shape[1:-3])) if x.ndim == 5 else 1
        xb = x.reshape((C, n) + x.shape[-3:])
        gb = grad_out.reshape((K, n) + grad_out.shape[-3:])
        per_sample = C * ksize * int(np.prod(grad_out.shape[-3:]))
        step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
        dw2 = np.zeros((K, C * ksize))
        for i0 in range(0, n, step):
            i1 = min(n, i0 + step)
            v = sliding_window_view(xb[:, i0:i1], kernel, axis=(-3, -2, -1))
            cols = v.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(C * ksize, -1)
            dw2 += gb[:, i0:i1].reshape(K, -1) @ cols.T
        dw = dw2.reshape(p.weights.shape)

    dx = None
    if input_grad:
        if kernel == (1, 1, 1):
            dx = (p.weights.reshape(K, C).T @ g2).reshape(x.shape)
        else:
            dx = _col2im_grad(p.weights, grad_out, x.shape)
    return Gradients(weights=dw, bias=db, input=dx)


def _check_prelu(x: np.ndarray, a: PReluParams) -> None:
    if x.shape[0] != a.slopes.shape[0]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[0]} channels, got {a.slopes.shape[0]} slopes"
        )


def prelu_forward(x: np.ndarray, a: PReluParams) -> np.ndarray:
    """``max(0, x) + a * min(0, x)`` with one slope per channel."""
    x = np.asarray(x, dtype=np.float64)
    _check_prelu(x, a)
    return np.where(x > 0, x, _channel_view(a.slopes, x.ndim) * x)


def prelu_backward(x: np.ndarray, a: PReluParams, grad_out: np.ndarray) -> Gradients:
    x = np.asarray(x, dtype=np.float64)
    _check_prelu(x, a)
    if grad_out.shape != x.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    pos = x > 0
    dx = np.where(pos, grad_out, _channel_view(a.slopes, x.ndim) * grad_out)
    neg_part = np.where(pos, 0.0, x)
    da = (grad_out * neg_part).reshape(x.shape[0], -1).sum(axis=1)
    return Gradients(slopes=da, input=dx)


def softmax(scores: np.ndarray) -> np.ndarray:
    """Channel-wise softmax (axis 0) with max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] < 2:
        raise ValueError("softmax needs at least 2 channels")
    z = scores - scores.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def log_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    z = scores - scores.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def he_init(shape, fan_in: int, rng: np.random.Generator) -> ConvParams:
    """Zero-mean Gaussian weights with std ``sqrt(2 / fan_in)``, zero biases.

    ``shape`` is the 5D weight shape ``(K, C, kd, kh, kw)``.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    shape = tuple(int(s) for s in shape)
    std = np.sqrt(2.0 / fan_in)
    return ConvParams(rng.normal(0.0, std, size=shape), np.zeros(shape[0]))
