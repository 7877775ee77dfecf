"""Reference forward pass built on a direct nested-loop convolution.

Shares no arithmetic with the im2col/GEMM kernels in :mod:`voxseg.tensor`,
which makes it a suitable slow path for cross-checking them. Patches are
laid out ``(C, D, H, W, n)`` so the innermost loop runs over ``n`` patches.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .network import NetworkSpec, NetworkState

__all__ = ["direct_conv", "direct_forward"]


@njit(cache=True)
def _conv_lanes(x, w, b, out):
    K, C, k0, k1, k2 = w.shape
    O0, O1, O2, n = out.shape[1], out.shape[2], out.shape[3], out.shape[4]
    acc = np.empty(n)
    for kk in range(K):
        for i in range(O0):
            for j in range(O1):
                for l in range(O2):
                    for p in range(n):
                        acc[p] = 0.0
                    for c in range(C):
                        for a in range(k0):
                            for bb in range(k1):
                                for e in range(k2):
                                    wv = w[kk, c, a, bb, e]
                                    for p in range(n):
                                        acc[p] += wv * x[c, i + a, j + bb, l + e, p]
                    for p in range(n):
                        out[kk, i, j, l, p] = acc[p] + b[kk]


def direct_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of ``x (C, D, H, W, n)`` with ``weights (K, C, kd, kh, kw)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    K = weights.shape[0]
    out_sp = tuple(s - k + 1 for s, k in zip(x.shape[1:4], weights.shape[2:]))
    out = np.empty((K,) + out_sp + (x.shape[4],))
    _conv_lanes(x, weights, np.ascontiguousarray(bias, dtype=np.float64), out)
    return out


def _prelu(z: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    a = slopes.reshape((-1,) + (1,) * (z.ndim - 1))
    return np.maximum(z, 0.0) + a * np.minimum(z, 0.0)


def _crop(x: np.ndarray, target) -> np.ndarray:
    sl = [slice(None)]
    for s, t in zip(x.shape[1:4], target):
        m = (s - t) // 2
        sl.append(slice(m, m + t))
    return x[tuple(sl)]


def direct_forward(state: NetworkState, spec: NetworkSpec, patches: np.ndarray) -> np.ndarray:
    """Class scores for ``patches (n, D, H, W)``; returns ``(C, D', H', W', n)``."""
    h = np.ascontiguousarray(np.moveaxis(np.asarray(patches, dtype=np.float64), 0, -1))[None]
    n_conv = len(spec.conv_widths)
    taps = []
    for idx, layer in enumerate(spec.layers(), 1):
        w = state.params[f"{layer.name}.weight"]
        b = state.params[f"{layer.name}.bias"]
        if layer.kind == "conv3d":
            z = direct_conv(h, w, b)
        else:
            z = np.tensordot(w.reshape(w.shape[:2]), h, axes=(1, 0))
            z += b.reshape((-1,) + (1,) * (z.ndim - 1))
        h = _prelu(z, state.params[f"{layer.name}.slope"]) if layer.has_prelu else z
        if idx in spec.fusion_taps:
            taps.append(h)
        if idx == n_conv and taps:
            h = np.concatenate([_crop(t, h.shape[1:4]) for t in taps], axis=0)
    return h
