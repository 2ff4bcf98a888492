"""2D discrete Fourier transforms.

Conventions: the forward transform is unnormalized with kernel
``exp(-2πi(uh/H + vw/W))``; the inverse carries the 1/(H·W) factor.  Power-of-two
lengths use an iterative radix-2 Cooley-Tukey pass vectorized over all leading
axes; other lengths go through Bluestein's chirp-z reformulation on a
power-of-two grid.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import apply, register
from .tensor import ComplexGrid, DimensionError, Tensor

IMAG_RESIDUE_LIMIT = 1e-6
NAIVE_MAX_POINTS = 4096
SMALL_DFT_MAX = 32


class SpectralResidueError(ArithmeticError):
    """The inverse transform produced a non-negligible imaginary part."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=16)
def _small_dft_matrix(n: int) -> np.ndarray:
    # short rows are cheaper as one GEMM against the radix-2 transform of the identity
    m = _radix2(np.eye(n))
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def _twiddles(m: int) -> np.ndarray:
    return np.exp(-1j * np.pi * np.arange(m) / m)[:, None]


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """Radix-2 DFT along the last axis; ``x.shape[-1]`` must be a power of two."""
    n = x.shape[-1]
    if n <= SMALL_DFT_MAX and x.ndim > 1:
        return x @ _small_dft_matrix(n)
    return _radix2(x)


def _radix2(x: np.ndarray) -> np.ndarray:
    lead = x.shape[:-1]
    n = x.shape[-1]
    # row r of X holds the length-m DFT of the stride-(n/m) subsequence
    X = x.reshape(lead + (1, n)).astype(np.complex128)
    m = 1
    while m < n:
        half = X.shape[-1] // 2
        even = X[..., :half]
        odd = X[..., half:] * _twiddles(m)
        X = np.concatenate([even + odd, even - odd], axis=-2)
        m *= 2
    return X.reshape(lead + (n,))


@lru_cache(maxsize=64)
def _bluestein_plan(n: int):
    m = 1
    while m < 2 * n - 1:
        m *= 2
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return m, chirp, _fft_pow2(b)


def _fft_bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m, chirp, fb = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _ifft_any(_fft_pow2(a) * fb)
    return conv[..., :n] * chirp


def _fft_any(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    return _fft_pow2(x) if _is_pow2(n) else _fft_bluestein(x)


def _ifft_any(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return np.conj(_fft_any(np.conj(x))) / n


def fft_last2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the last two axes of a numpy array."""
    y = _fft_any(x)
    y = _fft_any(np.swapaxes(y, -1, -2))
    return np.ascontiguousarray(np.swapaxes(y, -1, -2))


def ifft_last2(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft_last2` (carries the 1/(H·W) factor)."""
    h, w = x.shape[-2], x.shape[-1]
    return np.conj(fft_last2(np.conj(x))) / (h * w)


def _fft_flops(h: int, w: int) -> int:
    m = h * w
    return int(round(5 * m * np.log2(m))) if m > 1 else 0


# -- registered ops ---------------------------------------------------------

def _fft2_fwd(x):
    return fft_last2(x), x.shape


def _fft2_bwd(g, shape):
    # adjoint of the unnormalized DFT is H·W times the inverse
    h, w = shape[-2], shape[-1]
    return ((ifft_last2(g) * (h * w)).real,)


register("fft2", backward=_fft2_bwd, complex_out=True,
         flops=lambda ins, out: out.shape[0] * out.shape[1] * _fft_flops(*out.shape[-2:]))(_fft2_fwd)


def _ifft2_fwd(z):
    y = ifft_last2(z)
    residue = float(np.max(np.abs(y.imag))) if y.size else 0.0
    if residue > IMAG_RESIDUE_LIMIT:
        raise SpectralResidueError(
            f"inverse FFT imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_LIMIT:g}; "
            "spectrum is not conjugate-symmetric")
    return np.ascontiguousarray(y.real), z.shape


def _ifft2_bwd(g, shape):
    h, w = shape[-2], shape[-1]
    return (fft_last2(g) / (h * w),)


register("ifft2", backward=_ifft2_bwd,
         flops=lambda ins, out: out.shape[0] * out.shape[1] * _fft_flops(*out.shape[-2:]))(_ifft2_fwd)


def _cscale_fwd(z, w):
    return z * w[:, :, None, None], (z, w)


def _cscale_bwd(g, saved):
    z, w = saved
    gw = (g.real * z.real + g.imag * z.imag).sum(axis=(2, 3))
    return g * w[:, :, None, None], gw


register("spectral_scale", backward=_cscale_bwd, complex_out=True,
         flops=lambda ins, out: 2 * out.size)(_cscale_fwd)


def fft2(x: Tensor) -> ComplexGrid:
    """Forward 2D DFT of every (n, c) slice."""
    if x.ndim != 4:
        raise DimensionError(f"fft2 expects (N, C, H, W), got {x.shape}")
    return apply("fft2", x)


def ifft2(z: ComplexGrid, return_residue: bool = False):
    """Normalized inverse transform, real part only.

    Raises :class:`SpectralResidueError` when the discarded imaginary part exceeds
    ``IMAG_RESIDUE_LIMIT``.  With ``return_residue`` the max |imag| is returned too.
    """
    out = apply("ifft2", z)
    if return_residue:
        return out, float(np.max(np.abs(ifft_last2(z.data).imag)))
    return out


def spectral_scale(z: ComplexGrid, weights: Tensor) -> ComplexGrid:
    """Multiply each (n, c) spectrum by the real scalar ``weights[n, c]``."""
    if weights.shape != z.shape[:2]:
        raise DimensionError(f"spectral_scale: weights {weights.shape} vs spectrum batch/channels {z.shape[:2]}")
    return apply("spectral_scale", z, weights)


def naive_dft2(x: Tensor) -> ComplexGrid:
    """Direct double-sum DFT (test oracle); guarded to H·W ≤ 4096."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    h, w = data.shape[-2], data.shape[-1]
    if h * w > NAIVE_MAX_POINTS:
        raise ValueError(f"naive_dft2 limited to H·W ≤ {NAIVE_MAX_POINTS}, got {h}×{w}")
    hh = np.arange(h)
    ww = np.arange(w)
    out = np.empty(data.shape, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (u * hh[:, None] / h + v * ww[None, :] / w))
            out[..., u, v] = (data * phase).sum(axis=(-2, -1))
    return ComplexGrid._wrap(out)


def naive_idft2(z) -> np.ndarray:
    """Direct double-sum inverse (complex result), companion oracle to :func:`naive_dft2`."""
    data = z.data if isinstance(z, ComplexGrid) else np.asarray(z, dtype=np.complex128)
    h, w = data.shape[-2], data.shape[-1]
    if h * w > NAIVE_MAX_POINTS:
        raise ValueError(f"naive_idft2 limited to H·W ≤ {NAIVE_MAX_POINTS}, got {h}×{w}")
    uu = np.arange(h)
    vv = np.arange(w)
    out = np.empty(data.shape, dtype=np.complex128)
    for a in range(h):
        for b in range(w):
            phase = np.exp(2j * np.pi * (a * uu[:, None] / h + b * vv[None, :] / w))
            out[..., a, b] = (data * phase).sum(axis=(-2, -1)) / (h * w)
    return out
