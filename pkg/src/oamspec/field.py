"""Scalar field containers, vortex-superposition synthesis and the azimuthal
OAM decomposition used as ground truth throughout the package.

All lengths are in wavelengths. Grid sample ``n // 2`` sits on the optical
axis, so ``x_i = (i - n // 2) * pitch`` along both axes (rows are y).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy import ndimage
from PIL import Image


class PupilError(ValueError):
    """The requested beam does not fit inside the entrance pupil."""


class CapturedPowerWarning(UserWarning):
    """The decomposition basis misses a noticeable share of the field power."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    pitch: float = 0.5

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8:
            raise ValueError(f"grid needs an integer n >= 8, got {self.n}")
        if self.n % 2:
            raise ValueError(f"grid side must be even, got {self.n}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "pitch", float(self.pitch))

    @property
    def side(self) -> float:
        return self.n * self.pitch

    @property
    def coords(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.pitch

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` coordinate arrays indexed ``[row, col]``."""
        return np.meshgrid(self.coords, self.coords)

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = self.mesh()
        return np.hypot(X, Y), np.arctan2(Y, X)

    def default_waist(self) -> float:
        return 0.125 * self.side


@dataclass(frozen=True)
class SpectrumBasis:
    k_n: int = -10
    k_p: int = 10

    def __post_init__(self):
        if not self.k_n <= 0 <= self.k_p:
            raise ValueError(f"basis must satisfy k_n <= 0 <= k_p, got [{self.k_n}, {self.k_p}]")

    @property
    def count(self) -> int:
        return self.k_p - self.k_n + 1

    @property
    def ells(self) -> np.ndarray:
        return np.arange(self.k_n, self.k_p + 1)

    def index(self, ell: int) -> int:
        if not self.k_n <= ell <= self.k_p:
            raise ValueError(f"topological charge {ell} outside basis [{self.k_n}, {self.k_p}]")
        return ell - self.k_n


def _wrap(phases):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(phases, dtype=float) + np.pi, 2 * np.pi) - np.pi


def reference_index(amplitudes, basis: SpectrumBasis, rel_tol: float = 1e-6) -> int:
    """Index of the component that carries the zero phase reference.

    That is the l = 0 component when present, otherwise the nonzero component
    with the smallest |l| (negative charge first on ties).
    """
    a = np.asarray(amplitudes, dtype=float)
    present = a > rel_tol * max(a.max(), 1e-300)
    order = sorted(range(basis.count), key=lambda i: (abs(basis.ells[i]), basis.ells[i]))
    for i in order:
        if present[i]:
            return i
    return basis.index(0)


def reference_phases(amplitudes, phases, basis: SpectrumBasis) -> np.ndarray:
    phases = np.asarray(phases, dtype=float)
    ref = reference_index(amplitudes, basis)
    return _wrap(phases - phases[ref])


@dataclass
class OAMSpectrum:
    basis: SpectrumBasis
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.basis.count,):
            raise ValueError(f"expected {self.basis.count} weights, got shape {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ValueError("spectrum weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"spectrum weights must sum to 1, got {self.weights.sum():.12g}")

    def __getitem__(self, ell: int) -> float:
        return float(self.weights[self.basis.index(ell)])


@dataclass
class ComplexSpectrum:
    """Complex OAM coefficients ``c_l = a_l exp(j phi_l)`` over a basis."""

    basis: SpectrumBasis
    amplitudes: np.ndarray
    phases: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if self.phases is None:
            self.phases = np.zeros(self.basis.count)
        self.phases = np.asarray(self.phases, dtype=float)
        if self.amplitudes.shape != (self.basis.count,) or self.phases.shape != (self.basis.count,):
            raise ValueError(f"amplitudes and phases need shape ({self.basis.count},)")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be non-negative")
        norm = float(np.sum(self.amplitudes**2))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"spectrum is not normalized: sum a^2 = {norm:.12g}")
        self.phases = reference_phases(self.amplitudes, self.phases, self.basis)

    @classmethod
    def from_weights(cls, basis: SpectrumBasis, weights, phases=None) -> "ComplexSpectrum":
        w = np.asarray(weights, dtype=float)
        return cls(basis, np.sqrt(w / w.sum()), phases)

    @classmethod
    def single(cls, basis: SpectrumBasis, ell: int) -> "ComplexSpectrum":
        a = np.zeros(basis.count)
        a[basis.index(ell)] = 1.0
        return cls(basis, a)

    @property
    def coefficients(self) -> np.ndarray:
        return self.amplitudes * np.exp(1j * self.phases)

    @property
    def weights(self) -> np.ndarray:
        return self.amplitudes**2

    def power_spectrum(self) -> OAMSpectrum:
        w = self.weights
        return OAMSpectrum(self.basis, w / w.sum())


@dataclass
class ComplexField:
    grid: GridSpec
    samples: np.ndarray
    z: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.iscomplexobj(self.samples):
            self.samples = self.samples.astype(complex)
        if self.samples.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"samples shape {self.samples.shape} does not match grid n={self.grid.n}")

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) * self.grid.pitch**2)

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.samples) ** 2

    def normalized(self) -> "ComplexField":
        p = self.power
        if not np.isfinite(p) or p <= 0:
            raise ValueError("cannot normalize a field with zero or non-finite power")
        return ComplexField(self.grid, self.samples / np.sqrt(p), self.z)

    def copy(self) -> "ComplexField":
        return ComplexField(self.grid, self.samples.copy(), self.z)


def field_power(samples: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Power of one field or a stack of fields along the last two axes."""
    return np.sum(np.abs(samples) ** 2, axis=(-2, -1)) * grid.pitch**2


def check_pupil(grid: GridSpec, w0: float) -> None:
    if not w0 > 0:
        raise PupilError(f"beam waist must be positive, got {w0}")
    if 4 * w0 > grid.side:
        raise PupilError(
            f"beam waist {w0:g} does not fit the entrance pupil: 4*w0 = {4 * w0:g} "
            f"exceeds the aperture side {grid.side:g}"
        )


@lru_cache(maxsize=16)
def mode_stack(grid: GridSpec, basis: SpectrumBasis, w0: float) -> np.ndarray:
    """Unit-power vortex eigenmodes ``(sqrt2 r / w0)^|l| exp(-r^2/w0^2) exp(j l theta)``.

    Returns an array of shape ``(basis.count, n, n)``; read-only.
    """
    check_pupil(grid, w0)
    r, th = grid.polar()
    modes = np.empty((basis.count, grid.n, grid.n), dtype=complex)
    env = np.exp(-(r**2) / w0**2)
    for i, ell in enumerate(basis.ells):
        u = (np.sqrt(2) * r / w0) ** abs(ell) * env * np.exp(1j * ell * th)
        modes[i] = u / np.sqrt(np.sum(np.abs(u) ** 2) * grid.pitch**2)
    modes.setflags(write=False)
    return modes


def synthesize_batch(coefficients: np.ndarray, basis: SpectrumBasis, grid: GridSpec,
                     w0: float | None = None, dtype=np.complex128) -> np.ndarray:
    """Synthesize a stack of unit-power fields from ``(B, count)`` complex coefficients."""
    w0 = grid.default_waist() if w0 is None else float(w0)
    modes = mode_stack(grid, basis, w0)
    c = np.atleast_2d(np.asarray(coefficients, dtype=complex))
    if c.shape[-1] != basis.count:
        raise ValueError(f"expected {basis.count} coefficients per field, got {c.shape[-1]}")
    out = (c @ modes.reshape(basis.count, -1)).reshape(len(c), grid.n, grid.n)
    out /= np.sqrt(field_power(out, grid))[:, None, None]
    return out.astype(dtype, copy=False)


def synthesize(spec: ComplexSpectrum, grid: GridSpec, w0: float | None = None) -> ComplexField:
    """Superpose vortex eigenmodes with the coefficients of ``spec``.

    Every component shares one Gaussian waist ``w0`` (default 12.5% of the
    aperture side) and carries the radial factor ``(sqrt2 r / w0)^|l|``, so a
    single charge gives the familiar ring. The result has unit power.
    """
    norm = float(np.sum(spec.amplitudes**2))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"spectrum is not normalized: sum a^2 = {norm:.12g}")
    return ComplexField(grid, synthesize_batch(spec.coefficients[None], spec.basis, grid, w0)[0])


# -- decomposition -----------------------------------------------------------

_UPSAMPLE = 2
_SPLINE_ORDER = 5


@lru_cache(maxsize=8)
def _ring_geometry(grid: GridSpec):
    n = grid.n
    n_theta = 4 * n
    step = grid.pitch / _UPSAMPLE
    n_rings = int(np.floor(n / 2 * np.sqrt(2))) * _UPSAMPLE + 1
    rho = np.arange(n_rings) * step
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    m = n * _UPSAMPLE
    rows = m // 2 + rho[:, None] * np.sin(theta) / step
    cols = m // 2 + rho[:, None] * np.cos(theta) / step
    coords = np.array([rows.ravel(), cols.ravel()])
    return rho, step, n_theta, coords


def _fourier_upsample(u: np.ndarray, factor: int) -> np.ndarray:
    n = u.shape[-1]
    m = n * factor
    spec = sfft.fftshift(sfft.fft2(u))
    big = np.zeros((m, m), dtype=complex)
    o = (m - n) // 2
    big[o:o + n, o:o + n] = spec
    if n % 2 == 0:
        # split the unpaired Nyquist row/column so real fields stay real
        big[o, :] *= 0.5
        big[o + n, :] = big[o, :]
        big[:, o] *= 0.5
        big[:, o + n] = big[:, o]
    return sfft.ifft2(sfft.ifftshift(big)) * factor**2


def ring_harmonics(samples: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Azimuthal Fourier coefficients ``c_l(rho)`` on concentric rings.

    Returns ``(rho, c)`` where ``c[k, m]`` is the coefficient of harmonic
    ``m`` (FFT ordering, ``4 n`` harmonics) on ring ``rho[k]``.
    """
    rho, _, n_theta, coords = _ring_geometry(grid)
    fine = _fourier_upsample(np.asarray(samples, dtype=complex), _UPSAMPLE)
    re = ndimage.map_coordinates(fine.real, coords, order=_SPLINE_ORDER, mode="constant", cval=0.0)
    im = ndimage.map_coordinates(fine.imag, coords, order=_SPLINE_ORDER, mode="constant", cval=0.0)
    ring = (re + 1j * im).reshape(len(rho), n_theta)
    return rho, sfft.fft(ring, axis=1) / n_theta


def _radial_integral(values: np.ndarray, rho: np.ndarray, step: float) -> np.ndarray:
    """Integrate ``values(rho) * rho`` over [0, inf) for even ``values``.

    Trapezoid rule with the Euler-Maclaurin endpoint terms at rho = 0.
    """
    g0, g1 = values[0], values[1]
    curvature = 2 * (g1 - g0) / step**2
    return step * np.sum(values * rho[:, None], axis=0) + step**2 * g0 / 12 - step**4 * curvature / 240


def harmonic_powers(samples: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Power ``P_m`` and radially weighted coefficient of every resolved harmonic."""
    rho, c = ring_harmonics(samples, grid)
    step = grid.pitch / _UPSAMPLE
    powers = 2 * np.pi * _radial_integral(np.abs(c) ** 2, rho, step)
    weighted = step * np.sum(c * rho[:, None], axis=0)
    return powers, weighted


def oam_decompose(field: ComplexField, basis: SpectrumBasis,
                  capture_tol: float = 1e-3) -> tuple[ComplexSpectrum, OAMSpectrum]:
    """Project a field onto ``exp(j l theta)`` ring by ring.

    For each radius the azimuthal coefficient ``c_l(rho) = (1/2pi) int E exp(-j l theta)``
    is computed on an oversampled ring; ``P_l = 2pi int |c_l(rho)|^2 rho drho``.
    The phase of component ``l`` is the phase of ``int c_l(rho) rho drho``,
    re-referenced to the reference component.

    Warns with :class:`CapturedPowerWarning` when the basis holds less than
    ``1 - capture_tol`` of the resolved azimuthal power.
    """
    if not field.power > 0:
        raise ValueError("cannot decompose a field with zero power")
    powers, weighted = harmonic_powers(field.samples, field.grid)
    powers = np.clip(powers, 0.0, None)
    n_theta = len(powers)
    idx = basis.ells % n_theta
    p = powers[idx]
    total = powers.sum()
    if p.sum() <= 0:
        raise ValueError("field carries no power inside the basis")
    captured = p.sum() / total
    if captured < 1 - capture_tol:
        warnings.warn(f"basis [{basis.k_n}, {basis.k_p}] captures only {captured:.6f} of the field power",
                      CapturedPowerWarning, stacklevel=2)
    weights = p / p.sum()
    amplitudes = np.sqrt(weights)
    amplitudes /= np.sqrt(np.sum(amplitudes**2))
    cspec = ComplexSpectrum(basis, amplitudes, np.angle(weighted[idx]))
    return cspec, OAMSpectrum(basis, weights / weights.sum())


def decompose_weights(samples: np.ndarray, grid: GridSpec, basis: SpectrumBasis) -> np.ndarray:
    """Power spectra ``(B, count)`` of a stack of fields, normalized inside the basis."""
    stack = np.asarray(samples).reshape(-1, grid.n, grid.n)
    out = np.empty((len(stack), basis.count))
    for i, u in enumerate(stack):
        powers, _ = harmonic_powers(u, grid)
        p = np.clip(powers[basis.ells % len(powers)], 0.0, None)
        out[i] = p / p.sum()
    return out


# -- phase-shift interferometry ---------------------------------------------

def phase_shift_frames(field: ComplexField, a_ref) -> list[np.ndarray]:
    """Four interferograms ``I_i = |E exp(j (i-1) pi/2) + A_R|^2``, i = 1..4."""
    return [np.abs(field.samples * np.exp(1j * k * np.pi / 2) + a_ref) ** 2 for k in range(4)]


def phase_shift_reconstruct(i1, i2, i3, i4, a_ref, grid: GridSpec | None = None) -> ComplexField:
    """Recover the signal field from four frames with reference steps of pi/2.

    ``E = (I1 - I3) / (4 A_R) + j (I4 - I2) / (4 A_R)``.
    """
    frames = [np.asarray(f, dtype=float) for f in (i1, i2, i3, i4)]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError(f"frame shapes differ: {[f.shape for f in frames]}")
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"frames must be square images, got {shape}")
    a_ref = np.asarray(a_ref, dtype=float)
    if np.any(a_ref <= 0):
        raise ValueError("reference amplitude must be positive")
    grid = grid or GridSpec(shape[0])
    if grid.n != shape[0]:
        raise ValueError(f"frames are {shape[0]} wide but grid has n={grid.n}")
    e = (frames[0] - frames[2]) / (4 * a_ref) + 1j * (frames[3] - frames[1]) / (4 * a_ref)
    return ComplexField(grid, e)


def preprocess_frames(raw, crop_side: int = 600, out_side: int = 200, blur_sigma: float = 1.0) -> np.ndarray:
    """Center-crop a camera frame, bicubically resample it and smooth it."""
    raw = np.asarray(raw, dtype=np.float64)
    h, w = raw.shape
    if crop_side > h or crop_side > w or crop_side < 1:
        raise ValueError(f"crop of {crop_side} px does not fit a {h}x{w} frame")
    r0 = (h - crop_side) // 2
    c0 = (w - crop_side) // 2
    crop = raw[r0:r0 + crop_side, c0:c0 + crop_side]
    if out_side != crop_side:
        img = Image.fromarray(crop.astype(np.float32), mode="F")
        crop = np.asarray(img.resize((out_side, out_side), Image.BICUBIC), dtype=np.float64)
    if blur_sigma > 0:
        crop = ndimage.gaussian_filter(crop, blur_sigma, mode="reflect")
    return crop
