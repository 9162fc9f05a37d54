"""Adverse-effect operators and the before/after robustness protocol.

Kinds: ``tr`` transverse rotation (rad), ``ts`` transverse shift along x
(beam waists), ``as`` angular shift / tilt in the xz plane (rad), ``ls``
longitudinal shift (Rayleigh ranges) and ``at`` atmospheric turbulence
(C_n^2). Turbulence lengths are in wavelengths and C_n^2 is used as a
screen-strength parameter on that scale.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .field import ComplexField, ComplexSpectrum, GridSpec, SpectrumBasis, decompose_weights, synthesize_batch
from .propagation import make_operator, rayleigh_range

KINDS = ("tr", "ts", "as", "ls", "at")


def _resample(samples: np.ndarray, rows: np.ndarray, cols: np.ndarray, order: int) -> np.ndarray:
    coords = np.array([rows.ravel(), cols.ravel()])
    kw = dict(order=order, mode="grid-constant", cval=0.0)
    re = ndimage.map_coordinates(samples.real, coords, **kw)
    im = ndimage.map_coordinates(samples.imag, coords, **kw)
    return (re + 1j * im).reshape(samples.shape)


def apply_rotation(field: ComplexField, angle: float, order: int = 3) -> ComplexField:
    """Rotate the field about the optical axis; samples leaving the grid are lost."""
    if angle == 0:
        return field.copy()
    g = field.grid
    idx = np.arange(g.n) - g.n // 2
    X, Y = np.meshgrid(idx, idx)
    c, s = np.cos(angle), np.sin(angle)
    cols = g.n // 2 + c * X + s * Y
    rows = g.n // 2 - s * X + c * Y
    return replace(field, samples=_resample(field.samples, rows, cols, order))


def apply_transverse_shift(field: ComplexField, dx: float, w0: float | None = None, order: int = 3) -> ComplexField:
    """Shift the beam by ``dx`` waists along +x."""
    g = field.grid
    w0 = g.default_waist() if w0 is None else w0
    if abs(dx) * w0 >= g.side / 4:
        raise ValueError(f"shift of {dx} waists leaves the aperture")
    if dx == 0:
        return field.copy()
    idx = np.arange(g.n, dtype=float)
    X, Y = np.meshgrid(idx, idx)
    return replace(field, samples=_resample(field.samples, Y, X - dx * w0 / g.pitch, order))


def apply_angular_shift(field: ComplexField, gamma: float, wavelength: float = 1.0) -> ComplexField:
    """Tilt the wavefront by ``gamma`` in the xz plane."""
    g = field.grid
    fx = np.sin(gamma) / wavelength
    u_max = 1 / (2 * g.pitch)
    if abs(fx) >= u_max:
        raise ValueError(f"tilt {gamma} rad moves the spectrum out of the sampled band")
    ramp = np.exp(2j * np.pi * fx * g.coords)[None, :]
    return replace(field, samples=field.samples * ramp)


def apply_longitudinal_shift(field: ComplexField, dz: float, w0: float | None = None,
                             pad_factor: int = 2) -> ComplexField:
    """Free-space propagation by ``dz`` Rayleigh ranges of a waist-``w0`` beam."""
    w0 = field.grid.default_waist() if w0 is None else w0
    if dz < 0:
        raise ValueError("longitudinal shift must be non-negative")
    op = make_operator(field.grid, dz * rayleigh_range(w0), pad_factor)
    out = replace(field, samples=op.apply(field.samples), z=field.z + op.distance)
    return out


# -- turbulence ---------------------------------------------------------------

@dataclass(frozen=True)
class TurbulenceConfig:
    cn2: float = 1e-4
    outer_scale: float = 10.0
    inner_scale: float = 0.01
    n_screens: int = 5
    path: float = 10.0
    wavelength: float = 1.0
    screen_n: int | None = None  # screen grid; defaults to the field grid
    screen_pitch: float | None = None

    def __post_init__(self):
        if self.cn2 < 0:
            raise ValueError("cn2 must be non-negative")
        if not 0 < self.inner_scale < self.outer_scale:
            raise ValueError(f"need 0 < inner scale < outer scale, got {self.inner_scale}, {self.outer_scale}")
        if self.n_screens < 1:
            raise ValueError("need at least one phase screen")
        if self.path <= 0:
            raise ValueError("path must be positive")

    @property
    def segment(self) -> float:
        return self.path / self.n_screens

    def fried_parameter(self, length: float | None = None) -> float:
        """Plane-wave coherence length over ``length`` (default: the whole path)."""
        k = 2 * np.pi / self.wavelength
        length = self.path if length is None else length
        if self.cn2 == 0:
            return np.inf
        return (0.423 * k**2 * self.cn2 * length) ** (-3 / 5)


def von_karman_psd(kappa: np.ndarray, cfg: TurbulenceConfig, dz: float) -> np.ndarray:
    """Phase PSD of one screen: ``2 pi k^2 dz 0.033 C_n^2 exp(-k^2/km^2) / (k^2 + k0^2)^(11/6)``."""
    k = 2 * np.pi / cfg.wavelength
    km = 5.92 / cfg.inner_scale
    k0 = 2 * np.pi / cfg.outer_scale
    return 2 * np.pi * k**2 * dz * 0.033 * cfg.cn2 * np.exp(-(kappa**2) / km**2) / (kappa**2 + k0**2) ** (11 / 6)


def make_von_karman_screen(cfg: TurbulenceConfig, grid: GridSpec, seed=None, dz: float | None = None) -> np.ndarray:
    """One modified von Karman phase screen (radians) by FFT filtering.

    Complex white noise is shaped by ``sqrt(PSD) * dkappa`` and transformed;
    the real part is kept and its spatial mean removed. No subharmonics are
    added. ``dz`` is the turbulent slab thickness (default one path segment).
    """
    n = cfg.screen_n or grid.n
    pitch = cfg.screen_pitch or grid.pitch
    if cfg.cn2 == 0:
        return np.zeros((n, n))
    rng = np.random.default_rng(seed)
    dz = cfg.segment if dz is None else dz
    dk = 2 * np.pi / (n * pitch)
    kf = 2 * np.pi * sfft.fftfreq(n, d=pitch)
    kx, ky = np.meshgrid(kf, kf)
    amp = np.sqrt(von_karman_psd(np.hypot(kx, ky), cfg, dz)) * dk
    amp[0, 0] = 0.0
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    screen = sfft.ifft2(noise * amp, norm="forward").real
    return screen - screen.mean()


def propagate_through_turbulence(field: ComplexField, cfg: TurbulenceConfig, seed=None,
                                 pad_factor: int = 2) -> ComplexField:
    """Split-step propagation: each segment applies one screen, then propagates."""
    g = field.grid
    if (cfg.screen_n or g.n) != g.n or (cfg.screen_pitch or g.pitch) != g.pitch:
        raise ValueError("turbulence screens must share the field grid")
    op = make_operator(g, cfg.segment, pad_factor)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # derived without spawn() so reusing a SeedSequence reproduces the same screens
    seeds = [np.random.SeedSequence(root.entropy, spawn_key=(*root.spawn_key, i)) for i in range(cfg.n_screens)]
    u = field.samples
    for s in seeds:
        if cfg.cn2 > 0:
            u = u * np.exp(1j * make_von_karman_screen(cfg, g, np.random.default_rng(s)))
        u = op.apply(u)
    return replace(field, samples=u, z=field.z + cfg.path)


def structure_function(screens: np.ndarray, max_lag: int) -> np.ndarray:
    """Ensemble phase structure function along x for integer pixel lags 1..max_lag."""
    screens = np.asarray(screens)
    return np.array([np.mean((screens[..., lag:] - screens[..., :-lag]) ** 2) for lag in range(1, max_lag + 1)])


def spectral_entropy(weights: np.ndarray) -> np.ndarray:
    w = np.clip(np.asarray(weights, dtype=float), 1e-300, None)
    return -np.sum(w * np.log(w), axis=-1)


# -- robustness protocol --------------------------------------------------------

DEFAULT_MAGNITUDES = {
    "tr": np.linspace(-np.pi, np.pi, 17),
    "ts": np.linspace(-1.0, 1.0, 21),
    "as": np.linspace(-9.6e-3, 9.6e-3, 17),
    "ls": np.linspace(0.0, 1.0, 11),
    "at": np.logspace(-4.5, -3.0, 7),
}


@dataclass
class RobustnessReport:
    kind: str
    magnitudes: np.ndarray
    mse_vs_before: np.ndarray
    mse_vs_after: np.ndarray
    mse_after_vs_before: np.ndarray
    per_mode: np.ndarray  # (magnitudes, probes, 3), same column order as the curves
    outputs: np.ndarray  # (magnitudes, probes, count)

    def rows(self):
        for i, m in enumerate(self.magnitudes):
            yield (self.kind, float(m), float(self.mse_vs_before[i]), float(self.mse_vs_after[i]),
                   float(self.mse_after_vs_before[i]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "magnitude", "mse_vs_before", "mse_vs_after", "mse_after_vs_before"])
            for kind, *vals in self.rows():
                w.writerow([kind, *(repr(v) for v in vals)])


def probe_set(kind: str, basis: SpectrumBasis, grid: GridSpec, w0: float, n_random: int = 20, seed=0):
    """Probe fields and labels: random multiplexed beams for rotation, single modes otherwise."""
    rng = np.random.default_rng(seed)
    if kind == "tr":
        w = np.abs(rng.standard_normal((n_random, basis.count)))
        w /= w.sum(axis=1, keepdims=True)
        coeffs = np.sqrt(w) * np.exp(1j * rng.uniform(-np.pi, np.pi, w.shape))
    else:
        coeffs = np.eye(basis.count, dtype=complex)
    return synthesize_batch(coeffs, basis, grid, w0)


def distort(field: ComplexField, kind: str, magnitude: float, w0: float, turbulence: TurbulenceConfig | None = None,
            seed=None) -> ComplexField:
    if kind == "tr":
        return apply_rotation(field, magnitude)
    if kind == "ts":
        return apply_transverse_shift(field, magnitude, w0)
    if kind == "as":
        return apply_angular_shift(field, magnitude)
    if kind == "ls":
        return apply_longitudinal_shift(field, magnitude, w0)
    if kind == "at":
        cfg = replace(turbulence or TurbulenceConfig(), cn2=float(magnitude))
        return propagate_through_turbulence(field, cfg, seed)
    raise ValueError(f"unknown distortion kind {kind!r}; expected one of {KINDS}")


def robustness_sweep(model, kind: str, magnitudes=None, probes: np.ndarray | None = None, w0: float | None = None,
                     turbulence: TurbulenceConfig | None = None, seed: int = 0) -> RobustnessReport:
    """Three-way MSE comparison for one perturbation kind.

    For each magnitude and probe: the model output on the distorted field is
    compared with the decomposition of the undistorted field ("before") and
    of the distorted field ("after"); the two ground truths are also compared
    with each other. Curves are averages over probes.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown distortion kind {kind!r}; expected one of {KINDS}")
    grid, basis = model.grid, model.basis
    w0 = grid.default_waist() if w0 is None else w0
    magnitudes = np.asarray(DEFAULT_MAGNITUDES[kind] if magnitudes is None else magnitudes, dtype=float)
    probes = probe_set(kind, basis, grid, w0, seed=seed) if probes is None else np.asarray(probes)
    before = decompose_weights(probes, grid, basis)
    per_mode = np.empty((len(magnitudes), len(probes), 3))
    outputs = np.empty((len(magnitudes), len(probes), basis.count))
    seeds = np.random.SeedSequence(seed).spawn(len(magnitudes))
    for i, mag in enumerate(magnitudes):
        probe_seeds = seeds[i].spawn(len(probes))
        distorted = np.stack([distort(ComplexField(grid, p), kind, mag, w0, turbulence, probe_seeds[j]).samples
                              for j, p in enumerate(probes)])
        after = decompose_weights(distorted, grid, basis)
        out, _ = model.predict(distorted.astype(model_dtype(model)))
        outputs[i] = out
        per_mode[i, :, 0] = np.mean((out - before) ** 2, axis=1)
        per_mode[i, :, 1] = np.mean((out - after) ** 2, axis=1)
        per_mode[i, :, 2] = np.mean((after - before) ** 2, axis=1)
    curves = per_mode.mean(axis=1)
    return RobustnessReport(kind, magnitudes, curves[:, 0], curves[:, 1], curves[:, 2], per_mode, outputs)


def model_dtype(model):
    return np.complex64 if model.stack.layers[0].theta.dtype == np.float32 else np.complex128
