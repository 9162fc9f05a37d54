"""Band-limited angular spectrum propagation with zero padding.

The transfer function is the exact scalar one,
``H = exp(j 2 pi z sqrt(1/lambda^2 - fx^2 - fy^2))``, evanescent components
removed, and additionally restricted to ``|fx|, |fy| < u_lim`` with
``u_lim = 1 / (lambda sqrt((2 df z)^2 + 1))`` and ``df = 1 / (padded side)``
(Matsushima & Shimobaba, Opt. Express 17, 19662). Lengths in wavelengths.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import fft as sfft

from .field import ComplexField, GridSpec


def fft_workers() -> int:
    return max(1, int(os.environ.get("OAMSPEC_THREADS", "1")))


def rayleigh_range(w0: float, wavelength: float = 1.0) -> float:
    if not w0 > 0:
        raise ValueError(f"waist must be positive, got {w0}")
    return np.pi * w0**2 / wavelength


def band_limit(grid: GridSpec, distance: float, pad_factor: int, wavelength: float = 1.0) -> float:
    df = 1.0 / (pad_factor * grid.side)
    return 1.0 / (wavelength * np.sqrt((2 * df * distance) ** 2 + 1))


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    grid: GridSpec
    distance: float
    pad_factor: int
    transfer: np.ndarray  # padded grid, FFT ordering; None for distance 0

    @property
    def padded(self) -> int:
        return self.grid.n * self.pad_factor

    def __post_init__(self):
        if self.transfer is not None:
            conj = np.conj(self.transfer)
            conj.setflags(write=False)
            object.__setattr__(self, "_conj", conj)
            object.__setattr__(self, "_c64", (self.transfer.astype(np.complex64), conj.astype(np.complex64)))

    def _transfer(self, dtype, adjoint: bool) -> np.ndarray:
        if dtype == np.complex64:
            return self._c64[int(adjoint)]
        return self._conj if adjoint else self.transfer

    def apply(self, u: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """Propagate the fields in the last two axes of ``u``.

        The padded FFT is split per axis so the all-zero padding rows are
        never transformed and only the retained rows are inverse-transformed.
        """
        if u.shape[-2:] != (self.grid.n, self.grid.n):
            raise ValueError(f"field shape {u.shape[-2:]} does not match operator grid n={self.grid.n}")
        if self.transfer is None:
            return u.copy()
        dtype = np.complex64 if u.dtype in (np.complex64, np.float32) else np.complex128
        n, N = self.grid.n, self.padded
        o = (N - n) // 2
        lead = u.shape[:-2]
        workers = fft_workers()
        rows = np.zeros(lead + (n, N), dtype=dtype)
        rows[..., o:o + n] = u
        rows = sfft.fft(rows, axis=-1, norm="ortho", overwrite_x=True, workers=workers)
        spec = np.zeros(lead + (N, N), dtype=dtype)
        spec[..., o:o + n, :] = rows
        spec = sfft.fft(spec, axis=-2, norm="ortho", overwrite_x=True, workers=workers)
        spec *= self._transfer(dtype, adjoint)
        spec = sfft.ifft(spec, axis=-2, norm="ortho", overwrite_x=True, workers=workers)
        out = sfft.ifft(spec[..., o:o + n, :], axis=-1, norm="ortho", workers=workers)
        return np.ascontiguousarray(out[..., o:o + n])


@lru_cache(maxsize=64)
def make_operator(grid: GridSpec, distance: float, pad_factor: int = 2,
                  wavelength: float = 1.0) -> PropagationOperator:
    """Build (and cache) the propagation operator for one hop."""
    distance = float(distance)
    if distance < 0:
        raise ValueError(f"propagation distance must be >= 0, got {distance}; use adjoint=True to go back")
    if int(pad_factor) != pad_factor or pad_factor < 1:
        raise ValueError(f"pad_factor must be a positive integer, got {pad_factor}")
    if distance == 0:
        return PropagationOperator(grid, 0.0, int(pad_factor), None)
    if pad_factor < 2:
        raise ValueError("nonzero distances need pad_factor >= 2")
    N = grid.n * pad_factor
    f = sfft.fftfreq(N, d=grid.pitch)
    fx, fy = np.meshgrid(f, f)
    arg = 1.0 / wavelength**2 - fx**2 - fy**2
    u_lim = band_limit(grid, distance, pad_factor, wavelength)
    passband = (arg > 0) & (np.abs(fx) < u_lim) & (np.abs(fy) < u_lim)
    h = np.where(passband, np.exp(2j * np.pi * distance * np.sqrt(np.clip(arg, 0, None))), 0)
    h.setflags(write=False)
    return PropagationOperator(grid, distance, int(pad_factor), h)


def propagate(field: ComplexField, op: PropagationOperator, adjoint: bool = False) -> ComplexField:
    if field.grid != op.grid:
        raise ValueError(f"field grid {field.grid} does not match operator grid {op.grid}")
    dz = -op.distance if adjoint else op.distance
    return replace(field, samples=op.apply(field.samples, adjoint), z=field.z + dz)
