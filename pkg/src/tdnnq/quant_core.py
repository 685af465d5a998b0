"""Per-tensor affine quantization: r = scale * (q - zero_point).

Symmetric mode uses the signed range [-(2^(b-1) - 1), 2^(b-1) - 1], so int8
never emits -128. Asymmetric mode uses the non-negative range [0, 2^(b-1) - 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Mode = Literal["symmetric", "asymmetric"]

SUPPORTED_BITS = (8, 16)
MODES = ("symmetric", "asymmetric")


class InvalidInputError(ValueError):
    """Non-finite values or malformed arguments reached a quantization primitive."""


def qrange(bits: int, mode: str) -> tuple[int, int]:
    if bits not in SUPPORTED_BITS:
        raise InvalidInputError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")
    top = 2 ** (bits - 1) - 1
    if mode == "symmetric":
        return -top, top
    if mode == "asymmetric":
        return 0, top
    raise InvalidInputError(f"unknown quantization mode {mode!r}")


def storage_dtype(bits: int) -> np.dtype:
    return np.dtype(np.int8) if bits == 8 else np.dtype(np.int16)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8
    mode: Mode = "symmetric"

    def __post_init__(self):
        qmin, qmax = qrange(self.bits, self.mode)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError(f"scale must be positive and finite, got {self.scale}")
        if not qmin <= self.zero_point <= qmax:
            raise InvalidInputError(
                f"zero_point {self.zero_point} outside [{qmin}, {qmax}] for {self.bits}-bit {self.mode}"
            )

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.mode)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.mode)[1]

    @property
    def real_min(self) -> float:
        """Smallest real value representable without saturation."""
        return self.scale * (self.qmin - self.zero_point)

    @property
    def real_max(self) -> float:
        return self.scale * (self.qmax - self.zero_point)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "bits": self.bits, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), d["mode"])


@dataclass(frozen=True)
class RangeStats:
    min: float
    max: float

    def __post_init__(self):
        if not (math.isfinite(self.min) and math.isfinite(self.max)):
            raise InvalidInputError(f"range must be finite, got ({self.min}, {self.max})")
        if self.min > self.max:
            raise InvalidInputError(f"range min {self.min} exceeds max {self.max}")

    @classmethod
    def of(cls, x) -> "RangeStats":
        x = np.asarray(x)
        if x.size == 0:
            raise InvalidInputError("cannot take the range of an empty array")
        return cls(float(np.min(x)), float(np.max(x)))

    def merge(self, other: "RangeStats") -> "RangeStats":
        return RangeStats(min(self.min, other.min), max(self.max, other.max))


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InvalidInputError(f"quantized payload must be integer, got {self.data.dtype}")
        if self.data.size and (self.data.min() < self.params.qmin or self.data.max() > self.params.qmax):
            raise InvalidInputError("quantized payload escapes the declared range")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def compute_qparams(stats: RangeStats, bits: int = 8, mode: str = "symmetric") -> QuantParams:
    """Scale and zero-point covering ``stats`` for the given integer range.

    A degenerate range ``(c, c)`` is replaced by ``(c - 1, c + 1)``; so is a range
    too narrow for its scale to be a normal float. Symmetric mode
    widens the range to ``[-m, m]`` with ``m = max(|min|, |max|)``, which pins the
    zero-point at 0. Asymmetric mode widens the range to include 0 so that the
    zero-point always lands inside the integer range.
    """
    if not isinstance(stats, RangeStats):
        stats = RangeStats(*stats)
    qmin, qmax = qrange(bits, mode)
    lo, hi = stats.min, stats.max
    if lo == hi or (hi - lo) / (qmax - qmin) < np.finfo(np.float64).tiny:
        lo, hi = lo - 1.0, lo + 1.0
    if mode == "symmetric":
        m = max(abs(lo), abs(hi))
        lo, hi = -m, m
    else:
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / (qmax - qmin)
    if mode == "symmetric":
        zero_point = 0
    else:
        zero_point = int(np.clip(np.rint(qmin - lo / scale), qmin, qmax))
    return QuantParams(float(scale), zero_point, bits, mode)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")


def quantize(x, params: QuantParams) -> QuantizedTensor:
    """Round half to even, then saturate into ``[qmin, qmax]``."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    # huge inputs may overflow to +-inf here; the clip saturates them correctly
    with np.errstate(over="ignore"):
        q = np.rint(x / params.scale) + params.zero_point
    q = np.clip(q, params.qmin, params.qmax)
    return QuantizedTensor(q.astype(storage_dtype(params.bits)), params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    p = q.params
    return p.scale * (q.data.astype(np.float64) - p.zero_point)


def fake_quantize(x, params: QuantParams) -> np.ndarray:
    """Snap ``x`` onto the quantization grid, staying in floating point.

    float32 inputs come back as float32; everything else as float64.
    """
    x = np.asarray(x)
    out = dequantize(quantize(x, params))
    if x.dtype == np.float32:
        return out.astype(np.float32)
    return out


def in_range_mask(x, params: QuantParams) -> np.ndarray:
    """True where ``x`` falls inside the representable real interval."""
    x = np.asarray(x)
    return (x >= params.real_min) & (x <= params.real_max)


def clamp_surrogate(x, params: QuantParams) -> np.ndarray:
    """Fake quantization with rounding removed: saturation only."""
    return np.clip(np.asarray(x, dtype=np.float64), params.real_min, params.real_max)
