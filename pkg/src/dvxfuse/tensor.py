"""Value types shared by every layer: real tensors, complex grids, conv/pool specs."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Tuple

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class Tensor:
    """Immutable float64 array.

    Image-like data uses the (N, C, H, W) layout; matrices and vectors used by the
    attention and classifier layers share the same type with lower rank.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; caller hands over ownership
        out = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor._wrap(np.zeros(shape))

    @staticmethod
    def full(shape, value: float) -> "Tensor":
        return Tensor._wrap(np.full(shape, float(value)))


class ComplexGrid:
    """Per-channel 2D complex spectrum, shape (N, C, H, W)."""

    __slots__ = ("_data",)

    def __init__(self, real, imag=None) -> None:
        re = np.asarray(real, dtype=np.float64)
        im = np.zeros_like(re) if imag is None else np.asarray(imag, dtype=np.float64)
        if re.shape != im.shape:
            raise DimensionError(f"real/imag shapes differ: {re.shape} vs {im.shape}")
        arr = re + 1j * im
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ComplexGrid":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.complex128)
        arr.flags.writeable = False
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def real(self) -> np.ndarray:
        return self._data.real.copy()

    @property
    def imag(self) -> np.ndarray:
        return self._data.imag.copy()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    def __repr__(self) -> str:
        return f"ComplexGrid(shape={self.shape})"


class PoolKind(enum.Enum):
    MAX = "max"
    AVG = "avg"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise DimensionError(f"channels and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    @classmethod
    def pointwise(cls, cin: int, cout: int) -> "ConvSpec":
        return cls(cin, cout)

    @classmethod
    def depthwise(cls, channels: int, k: int = 3, stride: int = 1) -> "ConvSpec":
        return cls(channels, channels, (k, k), (stride, stride), (k // 2, k // 2), channels)

    @classmethod
    def square(cls, cin: int, cout: int, k: int, stride: int = 1) -> "ConvSpec":
        """k×k convolution with 'same' zero padding."""
        return cls(cin, cout, (k, k), (stride, stride), (k // 2, k // 2))


def as_pair(v) -> Tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))
