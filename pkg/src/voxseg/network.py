"""The three FCNN architectures as composable layer stacks.

``CNN_base``: 3 conv layers with 7^3 kernels. ``CNN_single``: 9 conv layers
with 3^3 kernels. ``CNN_multi``: ``CNN_single`` plus center-cropped
feature maps of conv layers 3, 6 and 9 concatenated (shallow to deep) before
the first fully-connected layer. Fully-connected layers are 1^3 convolutions
so every network applies to inputs of any size at or above its receptive
field.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (
    ConvParams,
    PReluParams,
    conv3d_backward,
    conv3d_forward,
    he_init,
    prelu_backward,
    prelu_forward,
)

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "NetworkState",
    "ForwardCache",
    "StaleCacheError",
    "ARCHITECTURES",
    "make_spec",
    "build",
    "forward",
    "backward",
    "center_crop",
    "center_uncrop",
    "parameter_census",
    "forward_macs",
]

ARCHITECTURES = ("CNN_base", "CNN_single", "CNN_multi")
_ALIASES = {"cnn_base": "CNN_base", "cnn_single": "CNN_single", "cnn_multi": "CNN_multi"}

PAPER_CONV_WIDTHS = {
    "CNN_base": (25, 50, 75),
    "CNN_single": (25, 25, 25, 50, 50, 50, 75, 75, 75),
    "CNN_multi": (25, 25, 25, 50, 50, 50, 75, 75, 75),
}
PAPER_FC_WIDTHS = (400, 200, 150)


class StaleCacheError(RuntimeError):
    """Backward was called with a cache produced before the last parameter update."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv3d" | "fc_as_1x1x1" | "softmax_classifier"
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]

    @property
    def has_prelu(self) -> bool:
        return self.kind != "softmax_classifier"


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative architecture description.

    ``fusion_taps`` holds 1-based conv-layer indices whose (PReLU) outputs are
    center-cropped and concatenated before the first fc layer; it must end at
    the last conv layer. ``name="custom"`` skips the paper-architecture checks
    and is meant for small test networks.
    """

    name: str
    conv_widths: tuple[int, ...]
    conv_kernel: int
    fc_widths: tuple[int, ...] = PAPER_FC_WIDTHS
    num_classes: int = 9
    fusion_taps: tuple[int, ...] = ()
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "fusion_taps", tuple(int(t) for t in self.fusion_taps))
        self.validate()

    def validate(self) -> None:
        if not self.conv_widths:
            raise ValueError("at least one conv layer is required")
        if any(w < 1 for w in self.conv_widths + self.fc_widths):
            raise ValueError("layer widths must be positive")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd and >= 1, got {self.conv_kernel}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        n = len(self.conv_widths)
        if self.fusion_taps:
            if any(t < 1 or t > n for t in self.fusion_taps):
                raise ValueError(f"fusion taps {self.fusion_taps} outside 1..{n}")
            if list(self.fusion_taps) != sorted(set(self.fusion_taps)):
                raise ValueError("fusion taps must be strictly increasing")
            if self.fusion_taps[-1] != n:
                raise ValueError("fusion taps must include the last conv layer")
        if self.name == "custom":
            return
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}")
        if self.name == "CNN_base":
            if n != 3 or self.conv_kernel != 7 or self.fusion_taps:
                raise ValueError("CNN_base requires 3 conv layers of 7^3 kernels and no fusion")
        else:
            if n != 9 or self.conv_kernel != 3:
                raise ValueError(f"{self.name} requires 9 conv layers of 3^3 kernels")
            if self.name == "CNN_single" and self.fusion_taps:
                raise ValueError("CNN_single has no fusion taps")
            if self.name == "CNN_multi" and self.fusion_taps != (3, 6, 9):
                raise ValueError("CNN_multi fuses conv layers 3, 6 and 9")
        if len(self.fc_widths) != 3:
            raise ValueError(f"{self.name} has 3 fully-connected layers")

    @property
    def receptive_field(self) -> int:
        return 1 + len(self.conv_widths) * (self.conv_kernel - 1)

    @property
    def fc_input_channels(self) -> int:
        if self.fusion_taps:
            return sum(self.conv_widths[t - 1] for t in self.fusion_taps)
        return self.conv_widths[-1]

    @property
    def depth(self) -> int:
        return len(self.conv_widths) + len(self.fc_widths) + 1

    def output_shape(self, spatial) -> tuple[int, int, int]:
        shrink = self.receptive_field - 1
        return tuple(int(s) - shrink for s in spatial)

    def layers(self) -> list[LayerSpec]:
        k = (self.conv_kernel,) * 3
        out = []
        c = self.in_channels
        for i, w in enumerate(self.conv_widths, 1):
            out.append(LayerSpec(f"conv{i}", "conv3d", c, w, k))
            c = w
        c = self.fc_input_channels
        for i, w in enumerate(self.fc_widths, 1):
            out.append(LayerSpec(f"fc{i}", "fc_as_1x1x1", c, w, (1, 1, 1)))
            c = w
        out.append(LayerSpec("classifier", "softmax_classifier", c, self.num_classes, (1, 1, 1)))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def make_spec(
    arch: str,
    conv_widths=None,
    fc_widths=None,
    num_classes: int = 9,
) -> NetworkSpec:
    """Paper architecture by name (``cnn_base``/``CNN_base`` etc.), optionally rescaled."""
    name = _ALIASES.get(arch.lower(), arch) if isinstance(arch, str) else arch
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return NetworkSpec(
        name=name,
        conv_widths=tuple(conv_widths) if conv_widths is not None else PAPER_CONV_WIDTHS[name],
        conv_kernel=7 if name == "CNN_base" else 3,
        fc_widths=tuple(fc_widths) if fc_widths is not None else PAPER_FC_WIDTHS,
        num_classes=num_classes,
        fusion_taps=(3, 6, 9) if name == "CNN_multi" else (),
    )


@dataclass
class NetworkState:
    """Learned parameters and momentum buffers, keyed in declaration order.

    Keys are ``<layer>.weight``, ``<layer>.bias`` and ``<layer>.slope``.
    ``version`` increments on every in-place update so stale forward caches
    can be detected.
    """

    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        if not self.velocity:
            self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def conv(self, layer: str) -> ConvParams:
        return ConvParams(self.params[f"{layer}.weight"], self.params[f"{layer}.bias"])

    def prelu(self, layer: str) -> PReluParams:
        return PReluParams(self.params[f"{layer}.slope"])

    def copy(self) -> "NetworkState":
        return NetworkState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.version,
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def build(spec: NetworkSpec, rng: np.random.Generator) -> NetworkState:
    """He-initialized weights, zero biases, PReLU slopes at 0.25."""
    spec.validate()
    params: dict[str, np.ndarray] = {}
    for layer in spec.layers():
        shape = (layer.out_channels, layer.in_channels) + layer.kernel
        fan_in = layer.in_channels * int(np.prod(layer.kernel))
        p = he_init(shape, fan_in, rng)
        params[f"{layer.name}.weight"] = p.weights
        params[f"{layer.name}.bias"] = p.bias
        if layer.has_prelu:
            params[f"{layer.name}.slope"] = PReluParams.initial(layer.out_channels).slopes
    return NetworkState(params)


def center_crop(fm: np.ndarray, target) -> np.ndarray:
    """Spatially centered sub-block of the last three axes; channels untouched."""
    target = tuple(int(t) for t in target)
    spatial = fm.shape[-3:]
    slices = []
    for s, t in zip(spatial, target):
        if s < t:
            raise ValueError(f"cannot crop spatial dims {spatial} to {target}")
        if (s - t) % 2:
            raise ValueError(f"parity mismatch cropping {spatial} to {target}")
        m = (s - t) // 2
        slices.append(slice(m, m + t))
    return fm[(Ellipsis,) + tuple(slices)]


def center_uncrop(grad: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`center_crop`: scatter ``grad`` into the center of zeros."""
    out = np.zeros(shape, dtype=grad.dtype)
    slices = []
    for s, t in zip(shape[-3:], grad.shape[-3:]):
        m = (s - t) // 2
        slices.append(slice(m, m + t))
    out[(Ellipsis,) + tuple(slices)] = grad
    return out


@dataclass
class ForwardCache:
    inputs: dict[str, np.ndarray]
    preacts: dict[str, np.ndarray]
    taps: dict[str, tuple]  # conv layer name -> full tap shape
    state_version: int
    state_id: int
    activations: dict[str, np.ndarray] = field(default_factory=dict)


def _as_feature_map(x: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim not in (4, 5) or x.shape[0] != spec.in_channels:
        raise ValueError(
            f"expected a channel-first feature map with {spec.in_channels} channel(s), got {x.shape}"
        )
    rf = spec.receptive_field
    if any(s < rf for s in x.shape[-3:]):
        raise ValueError(f"input spatial dims {x.shape[-3:]} below receptive field {rf}")
    return x


def forward(
    state: NetworkState, spec: NetworkSpec, segment: np.ndarray, keep_taps: bool = False
) -> tuple[np.ndarray, ForwardCache]:
    """Class scores (pre-softmax) and the activations needed by :func:`backward`.

    ``segment`` is ``(1, D, H, W)`` or batched ``(1, N, D, H, W)``; a bare 3D
    array is treated as a single channel. With ``keep_taps`` the uncropped
    fusion-tap outputs are kept in ``cache.activations``.
    """
    h = _as_feature_map(segment, spec)
    layers = spec.layers()
    n_conv = len(spec.conv_widths)
    inputs, preacts, taps, acts = {}, {}, {}, {}
    tapped = []
    for i, layer in enumerate(layers[:n_conv], 1):
        inputs[layer.name] = h
        z = conv3d_forward(h, state.conv(layer.name))
        preacts[layer.name] = z
        h = prelu_forward(z, state.prelu(layer.name))
        if i in spec.fusion_taps:
            tapped.append((layer.name, h))
            taps[layer.name] = h.shape
            if keep_taps:
                acts[layer.name] = h
    if tapped:
        target = h.shape[-3:]
        h = np.concatenate([center_crop(t, target) for _, t in tapped], axis=0)
    for layer in layers[n_conv:]:
        inputs[layer.name] = h
        z = conv3d_forward(h, state.conv(layer.name))
        if layer.has_prelu:
            preacts[layer.name] = z
            h = prelu_forward(z, state.prelu(layer.name))
        else:
            h = z
    cache = ForwardCache(inputs, preacts, taps, state.version, id(state), acts)
    return h, cache


def backward(
    state: NetworkState, spec: NetworkSpec, cache: ForwardCache, grad_scores: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients keyed like ``state.params``."""
    if cache.state_id != id(state) or cache.state_version != state.version:
        raise StaleCacheError("forward cache does not match the current network state")
    layers = spec.layers()
    n_conv = len(spec.conv_widths)
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(grad_scores, dtype=np.float64)

    for layer in reversed(layers[n_conv:]):
        if layer.has_prelu:
            pg = prelu_backward(cache.preacts[layer.name], state.prelu(layer.name), g)
            grads[f"{layer.name}.slope"] = pg.slopes
            g = pg.input
        cg = conv3d_backward(cache.inputs[layer.name], state.conv(layer.name), g)
        grads[f"{layer.name}.weight"] = cg.weights
        grads[f"{layer.name}.bias"] = cg.bias
        g = cg.input

    pending: dict[str, np.ndarray] = {}
    if spec.fusion_taps:
        offsets = np.cumsum([0] + [spec.conv_widths[t - 1] for t in spec.fusion_taps])
        for j, t in enumerate(spec.fusion_taps):
            name = f"conv{t}"
            piece = g[offsets[j]:offsets[j + 1]]
            pending[name] = center_uncrop(piece, cache.taps[name])
        g = pending.pop(f"conv{n_conv}")

    for i in range(n_conv, 0, -1):
        layer = layers[i - 1]
        if layer.name in pending:
            g = g + pending.pop(layer.name)
        pg = prelu_backward(cache.preacts[layer.name], state.prelu(layer.name), g)
        grads[f"{layer.name}.slope"] = pg.slopes
        cg = conv3d_backward(
            cache.inputs[layer.name], state.conv(layer.name), pg.input, input_grad=i > 1
        )
        grads[f"{layer.name}.weight"] = cg.weights
        grads[f"{layer.name}.bias"] = cg.bias
        g = cg.input
    return {k: grads[k] for k in state.params}


def parameter_census(spec: NetworkSpec, include_slopes: bool = False) -> dict[str, int]:
    """Weights + biases per layer in closed form, optionally counting PReLU slopes."""
    census = {}
    for layer in spec.layers():
        n = layer.out_channels * layer.in_channels * int(np.prod(layer.kernel)) + layer.out_channels
        if include_slopes and layer.has_prelu:
            n += layer.out_channels
        census[layer.name] = n
    return census


def forward_macs(spec: NetworkSpec, spatial) -> int:
    """Multiply-accumulates of one forward pass over an input block of ``spatial`` dims."""
    s = np.array([int(v) for v in spatial], dtype=np.int64)
    total = 0
    for layer in spec.layers():
        if layer.kind == "conv3d":
            s = s - (np.array(layer.kernel) - 1)
        total += int(np.prod(s)) * layer.out_channels * layer.in_channels * int(np.prod(layer.kernel))
    return total
