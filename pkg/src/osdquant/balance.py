"""Rotation-scaling channel balancing for convolution layers.

A conv layer computes ``k^T x`` for every C-vector ``x`` of input channels at a
spatial position and every matching kernel tap ``k``. Balancing rewrites it as

    k^T x = (k * s)^T (x / s) = (H (k * s))^T (H (x / s))

with ``H = (1/sqrt(C)) * Hadamard * diag(signs)`` orthonormal. The kernel side
``H (k * s)`` is folded into the stored weights once; at inference only the
fused per-channel divide plus the FWHT runs on the conv input.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .fakequant import calibrate_minmax, quantize
from .tensor import (ConvSpec, DimensionError, UnsupportedSizeError, as_tensor, conv2d,
                     fwht, is_power_of_two, random_signs)


class BalanceStateError(RuntimeError):
    """Operation not allowed in the layer's current folded state."""


@dataclass(frozen=True)
class BalanceParams:
    scales: np.ndarray
    alpha: float = 0.5
    hadamard_seed: int = 0
    hadamard_size: int = 0
    folded: bool = False

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 1 or not np.all(np.isfinite(scales)) or not np.all(scales > 0):
            raise ValueError("balance scales must be a finite positive vector")
        object.__setattr__(self, "scales", scales)
        if self.folded and self.hadamard_size != scales.size:
            raise ValueError("hadamard_size must equal the channel count")

    @property
    def signs(self) -> np.ndarray:
        return random_signs(self.hadamard_seed, self.hadamard_size)


def _channel_axis(x: np.ndarray) -> int:
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    return x.ndim - 3


def _along(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def hadamard_apply(x, signs: np.ndarray, axis: int = 0) -> np.ndarray:
    """``H x`` along ``axis``: flip signs, then the normalized FWHT."""
    x = as_tensor(x)
    return fwht(x * _along(signs, x.ndim, axis % x.ndim), normalized=True, axis=axis)


def hadamard_apply_t(x, signs: np.ndarray, axis: int = 0) -> np.ndarray:
    """``H^T x`` along ``axis`` (the normalized Walsh matrix is symmetric)."""
    x = as_tensor(x)
    return fwht(x, normalized=True, axis=axis) * _along(signs, x.ndim, axis % x.ndim)


def rht_matrix(seed: int, n: int) -> np.ndarray:
    """Explicit ``H`` for diagnostics and tests."""
    if not is_power_of_two(n):
        raise UnsupportedSizeError(f"Hadamard size must be a power of two, got {n}")
    return hadamard_apply(np.eye(n), random_signs(seed, n), axis=0)


def compute_scales(x_calib, kernel, alpha: float = 0.5) -> np.ndarray:
    """Per-input-channel migration scales ``max|X_c|^a / max|K_c|^(1-a)``.

    ``max|X_c|`` runs over batch and space, ``max|K_c|`` over every output filter
    and tap reading channel c. Zero maxima are replaced by 1.
    """
    x, k = as_tensor(x_calib), as_tensor(kernel)
    axis = _channel_axis(x)
    channels = x.shape[axis]
    if k.ndim != 4 or k.shape[1] != channels:
        raise DimensionError(f"kernel {k.shape} does not read {channels} channels")
    if x.size == 0:
        raise ValueError("empty calibration batch")
    x_max = np.abs(np.moveaxis(x, axis, 0).reshape(channels, -1)).max(axis=1)
    k_max = np.abs(k.transpose(1, 0, 2, 3).reshape(channels, -1)).max(axis=1)
    x_max[x_max == 0] = 1.0
    k_max[k_max == 0] = 1.0
    return x_max**alpha / k_max ** (1.0 - alpha)


@dataclass
class BalancedConvLayer:
    """A conv layer whose weights carry the folded balancing transform."""

    kernel: np.ndarray
    transformed: np.ndarray
    balance: BalanceParams
    spec: ConvSpec

    @classmethod
    def wrap(cls, kernel, spec: ConvSpec) -> "BalancedConvLayer":
        kernel = as_tensor(kernel)
        return cls(kernel=kernel, transformed=kernel.copy(),
                   balance=BalanceParams(scales=np.ones(spec.in_channels)), spec=spec)

    def transform_input(self, x) -> np.ndarray:
        """Online input transform: divide channels by ``s``; rotate once folded."""
        x = as_tensor(x)
        axis = _channel_axis(x)
        x = x / _along(self.balance.scales, x.ndim, axis)
        if self.balance.folded:
            x = online_rotate(x, self.balance)
        return x

    def transform_input_grad(self, g) -> np.ndarray:
        """Pull a gradient w.r.t. the transformed input back to the raw input."""
        g = as_tensor(g)
        axis = _channel_axis(g)
        if self.balance.folded:
            g = hadamard_apply_t(g, self.balance.signs, axis=axis)
        return g / _along(self.balance.scales, g.ndim, axis)

    def forward(self, x) -> np.ndarray:
        return conv2d(self.transform_input(x), self.transformed, self.spec)


def apply_scaling(layer: BalancedConvLayer, scales) -> BalancedConvLayer:
    """Multiply kernel input channel c by ``s_c``; the input is divided at runtime."""
    if layer.balance.folded:
        raise BalanceStateError("scaling must be applied before the rotation is folded")
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (layer.spec.in_channels,):
        raise DimensionError(f"need {layer.spec.in_channels} scales, got {scales.shape}")
    if np.all(scales == 1.0):
        return dataclasses.replace(layer)
    merged = layer.balance.scales * scales
    return dataclasses.replace(
        layer,
        transformed=layer.transformed * scales[None, :, None, None],
        balance=dataclasses.replace(layer.balance, scales=merged),
    )


def fold_rotation(layer: BalancedConvLayer, seed: int) -> BalancedConvLayer:
    """Fold ``H`` into every kernel tap: ``K''[f,:,u,v] = H K'[f,:,u,v]``."""
    if layer.balance.folded:
        raise BalanceStateError("rotation already folded")
    c = layer.spec.in_channels
    if not is_power_of_two(c):
        raise UnsupportedSizeError(f"cannot fold a Hadamard rotation over {c} channels")
    signs = random_signs(seed, c)
    return dataclasses.replace(
        layer,
        transformed=hadamard_apply(layer.transformed, signs, axis=1),
        balance=dataclasses.replace(layer.balance, hadamard_seed=seed,
                                    hadamard_size=c, folded=True),
    )


def online_rotate(x, balance: BalanceParams) -> np.ndarray:
    """Apply ``H`` to the channel vector at every spatial position."""
    if not balance.folded:
        raise BalanceStateError("online rotation needs a folded balance")
    x = as_tensor(x)
    axis = _channel_axis(x)
    if x.shape[axis] != balance.hadamard_size:
        raise DimensionError(f"input has {x.shape[axis]} channels, H is {balance.hadamard_size}")
    return hadamard_apply(x, balance.signs, axis=axis)


def balance_layer(kernel, spec: ConvSpec, x_calib, alpha: float = 0.5,
                  seed: int = 0, rotate: bool = True) -> BalancedConvLayer:
    layer = BalancedConvLayer.wrap(kernel, spec)
    layer = apply_scaling(layer, compute_scales(x_calib, layer.kernel, alpha))
    layer.balance = dataclasses.replace(layer.balance, alpha=alpha)
    return fold_rotation(layer, seed) if rotate else layer


@dataclass(frozen=True)
class LayerCost:
    """What overhead accounting needs to know about a conv layer."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    @property
    def macs(self) -> int:
        return (self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
                * self.out_hw[0] * self.out_hw[1])

    @property
    def rht_ops(self) -> int:
        # FWHT of length C costs C*log2(C) adds, once per input position
        c = self.in_channels
        return self.in_hw[0] * self.in_hw[1] * c * int(math.log2(c))


def rht_overhead(layers) -> float:
    """Online-RHT operations as a fraction of the model's convolution mult-adds."""
    layers = list(layers)
    total = sum(l.macs for l in layers)
    return sum(l.rht_ops for l in layers) / total if total else 0.0


# --- diagnostics -------------------------------------------------------------

def channel_extrema(x) -> dict[str, list[float]]:
    """Per-channel max and min over batch and space (the data of a channel plot)."""
    x = as_tensor(x)
    axis = _channel_axis(x)
    flat = np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
    return {"max": flat.max(axis=1).tolist(), "min": flat.min(axis=1).tolist()}


def stage_activations(x, kernel, alpha: float = 0.5, seed: int = 0) -> dict[str, np.ndarray]:
    """The conv input as seen after each balancing stage."""
    x = as_tensor(x)
    axis = _channel_axis(x)
    c = x.shape[axis]
    signs = random_signs(seed, c)
    s = _along(compute_scales(x, kernel, alpha), x.ndim, axis)
    return {
        "original": x,
        "scaled": x / s,
        "rotated": hadamard_apply(x, signs, axis=axis),
        "rotation_scaled": hadamard_apply(x / s, signs, axis=axis),
    }


def channel_spread(x) -> float:
    """max over channels of ``max|x_c|`` divided by the median of the same."""
    x = as_tensor(x)
    axis = _channel_axis(x)
    amax = np.abs(np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)).max(axis=1)
    med = float(np.median(amax))
    return float(amax.max() / med) if med > 0 else math.inf


def balancing_errors(x, kernel, spec: ConvSpec, bits: int = 4, alpha: float = 0.5,
                     seed: int = 0) -> dict[str, float]:
    """Conv-output error of per-tensor activation quantization under each transform.

    Each variant quantizes its transformed input and convolves with the matching
    transformed kernel; errors are squared Frobenius distances to the
    full-precision output, so all variants are measured in the same space.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    ref = conv2d(x, kernel, spec)
    variants = {
        "raw": BalancedConvLayer.wrap(kernel, spec),
        "scaled": balance_layer(kernel, spec, x, alpha, seed, rotate=False),
        "rotation_scaled": balance_layer(kernel, spec, x, alpha, seed, rotate=True),
    }
    out = {}
    for name, layer in variants.items():
        xt = layer.transform_input(x)
        xq = quantize(xt, calibrate_minmax(xt, bits))
        out[name] = float(np.sum((conv2d(xq, layer.transformed, spec) - ref) ** 2))
    return out


@dataclass
class BalanceReport:
    """Per-layer diagnostics written by the balancing stage."""

    layers: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, x, kernel, alpha: float, seed: int, scales: np.ndarray) -> None:
        stages = stage_activations(x, kernel, alpha, seed)
        self.layers[name] = {
            "alpha": alpha,
            "hadamard_seed": seed,
            "scales": np.asarray(scales).tolist(),
            "stages": {k: channel_extrema(v) for k, v in stages.items()},
            "spread": {k: channel_spread(v) for k, v in stages.items()},
        }

    def to_dict(self) -> dict:
        return {"layers": self.layers}
