"""Uniform affine fake quantization with MinMax calibration and an STE mask.

The integer code is ``clamp(rint((x - z) / s), l, u)`` and the simulated value is
``s * code + z``: the zero offset ``z`` lives in real units (it is the calibrated
minimum for asymmetric ranges and 0 for symmetric ones). ``rint`` rounds half to
even.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, as_tensor

MIN_BITS, MAX_BITS = 2, 8


def qrange(bits: int, symmetric: bool) -> tuple[int, int]:
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass(frozen=True)
class QuantParams:
    """Quantizer state. ``axis=None`` is per-tensor; otherwise one (scale, zero) per channel."""

    scale: np.ndarray
    zero: np.ndarray
    bits: int
    symmetric: bool
    axis: int | None = None

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        zero = np.atleast_1d(np.asarray(self.zero, dtype=np.float64))
        if scale.shape != zero.shape:
            raise ValueError(f"scale {scale.shape} and zero {zero.shape} differ")
        if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
            raise ValueError("scales must be finite and positive")
        if self.symmetric and np.any(zero != 0):
            raise ValueError("symmetric quantizers have zero offset 0")
        if self.axis is None and scale.size != 1:
            raise ValueError("per-tensor params carry a single scale")
        qrange(self.bits, self.symmetric)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero", zero)

    @property
    def lower(self) -> int:
        return qrange(self.bits, self.symmetric)[0]

    @property
    def upper(self) -> int:
        return qrange(self.bits, self.symmetric)[1]

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else f"per-channel({self.axis})"

    def _broadcast(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.axis is None:
            return self.scale[0], self.zero[0]
        axis = self.axis % x.ndim
        if x.shape[axis] != self.scale.size:
            raise DimensionError(
                f"tensor has {x.shape[axis]} channels on axis {axis}, params have {self.scale.size}"
            )
        shape = [1] * x.ndim
        shape[axis] = -1
        return self.scale.reshape(shape), self.zero.reshape(shape)

    def to_dict(self) -> dict:
        per_tensor = self.axis is None
        return {
            "bits": self.bits,
            "scale": float(self.scale[0]) if per_tensor else self.scale.tolist(),
            "zero": float(self.zero[0]) if per_tensor else self.zero.tolist(),
            "granularity": "per-tensor" if per_tensor else "per-channel",
            "axis": self.axis,
            "symmetric": self.symmetric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(scale=d["scale"], zero=d["zero"], bits=int(d["bits"]),
                   symmetric=bool(d["symmetric"]), axis=d.get("axis"))


def calibrate_minmax(x, bits: int, axis: int | None = None, symmetric: bool = False) -> QuantParams:
    """MinMax calibration over the whole tensor or per channel along ``axis``.

    A group whose range collapses (symmetric: all zeros; asymmetric: constant)
    gets scale 1 and zero equal to the constant, which quantizes it exactly.
    """
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    lo_q, hi_q = qrange(bits, symmetric)
    if axis is None:
        groups = x.reshape(1, -1)
    else:
        groups = np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
    if symmetric:
        amax = np.abs(groups).max(axis=1)
        degenerate = amax == 0
        scale = np.where(degenerate, 1.0, amax / hi_q)
        zero = np.zeros_like(scale)
    else:
        lo, hi = groups.min(axis=1), groups.max(axis=1)
        degenerate = hi == lo
        scale = np.where(degenerate, 1.0, (hi - lo) / (hi_q - lo_q))
        zero = lo
    return QuantParams(scale=scale, zero=zero, bits=bits, symmetric=symmetric, axis=axis)


def _scaled(x: np.ndarray, p: QuantParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s, z = p._broadcast(x)
    return (x - z) / s, s, z


def quantize(x, p: QuantParams | None) -> np.ndarray:
    """Quantize-dequantize roundtrip. ``p=None`` is the identity (full precision)."""
    x = as_tensor(x)
    if p is None:
        return x.copy()
    t, s, z = _scaled(x, p)
    code = np.clip(np.rint(t), p.lower, p.upper)
    return s * code + z


def ste_mask(x, p: QuantParams | None) -> np.ndarray:
    """1 where the scaled value ``(x - z)/s`` lies inside ``[l, u]``, else 0."""
    x = as_tensor(x)
    if p is None:
        return np.ones_like(x)
    t, _, _ = _scaled(x, p)
    return ((t >= p.lower) & (t <= p.upper)).astype(np.float64)


def ste_grad(x, p: QuantParams | None, upstream) -> np.ndarray:
    x, upstream = as_tensor(x), as_tensor(upstream)
    if x.shape != upstream.shape:
        raise DimensionError(f"x {x.shape} and upstream {upstream.shape} differ")
    return upstream * ste_mask(x, p)


def quant_error(x, p: QuantParams | None) -> float:
    """Squared Frobenius norm of the roundtrip error."""
    x = as_tensor(x)
    return float(np.sum(np.square(x - quantize(x, p))))


class FakeQuantizer:
    """Activation quantizer with fixed calibrated params; returns values and STE mask."""

    def __init__(self, params: QuantParams | None):
        self.params = params

    @property
    def bits(self) -> int | None:
        return None if self.params is None else self.params.bits

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return quantize(x, self.params), ste_mask(x, self.params)


class LinearizedQuantizer:
    """First-order expansion of a quantizer around a reference input.

    Returns ``Q(x0) + mask(x0) * (x - x0)``. Its exact derivative equals the STE
    surrogate at ``x0``, which makes finite-difference checks of STE gradients
    well defined.
    """

    def __init__(self, params: QuantParams | None, x0: np.ndarray):
        self.params = params
        self.x0 = as_tensor(x0).copy()
        self.q0 = quantize(self.x0, params)
        self.mask0 = ste_mask(self.x0, params)

    @property
    def bits(self) -> int | None:
        return None if self.params is None else self.params.bits

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if x.shape != self.x0.shape:
            raise DimensionError(f"linearized at {self.x0.shape}, called with {x.shape}")
        return self.q0 + self.mask0 * (x - self.x0), self.mask0
