import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from oamspec.field import (CapturedPowerWarning, ComplexField, ComplexSpectrum, GridSpec, OAMSpectrum, PupilError,
                           SpectrumBasis, decompose_weights, field_power, oam_decompose, phase_shift_frames,
                           phase_shift_reconstruct, preprocess_frames, reference_index, synthesize,
                           synthesize_batch)

from . import oracles

G64 = GridSpec(64, 0.5)
B5 = SpectrumBasis(-5, 5)
B10 = SpectrumBasis()


def random_spectrum(rng, basis):
    w = np.abs(rng.standard_normal(basis.count))
    return ComplexSpectrum.from_weights(basis, w, rng.uniform(-np.pi, np.pi, basis.count))


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(7)
    with pytest.raises(ValueError):
        GridSpec(9)
    with pytest.raises(ValueError):
        GridSpec(16, 0.0)
    g = GridSpec(200, 0.5)
    assert g.side == 100.0
    assert g.coords[100] == 0.0
    assert g.default_waist() == 12.5


def test_basis_defaults_and_bounds():
    assert B10.count == 21
    assert list(B5.ells) == list(range(-5, 6))
    with pytest.raises(ValueError):
        SpectrumBasis(1, 5)
    with pytest.raises(ValueError):
        B5.index(6)


def test_spectrum_types_validate():
    with pytest.raises(ValueError):
        OAMSpectrum(B5, np.full(11, 0.1))
    with pytest.raises(ValueError):
        ComplexSpectrum(B5, np.full(11, 0.5))
    with pytest.raises(ValueError):
        OAMSpectrum(B5, np.r_[-0.1, 1.1, np.zeros(9)])


def test_reference_phase_convention():
    a = np.zeros(11)
    a[[B5.index(-2), B5.index(2), B5.index(4)]] = 1 / np.sqrt(3)
    ph = np.zeros(11)
    ph[B5.index(-2)], ph[B5.index(2)] = 1.0, 2.5
    spec = ComplexSpectrum(B5, a, ph)
    # no l=0 component: the lowest |l| wins, negative first on ties
    assert reference_index(a, B5) == B5.index(-2)
    assert spec.phases[B5.index(-2)] == 0.0
    assert spec.phases[B5.index(2)] == pytest.approx(1.5)
    a0 = a.copy()
    a0[B5.index(0)] = 0.5
    a0 /= np.linalg.norm(a0)
    assert reference_index(a0, B5) == B5.index(0)
    assert np.all((spec.phases >= -np.pi) & (spec.phases < np.pi))


def test_single_mode_is_annulus_with_winding_phase():
    f = synthesize(ComplexSpectrum.single(B10, 5), GridSpec(128, 0.5))
    r, th = f.grid.polar()
    inten = f.intensity
    assert inten[64, 64] < 1e-12 * inten.max()
    ring = r[np.unravel_index(np.argmax(inten), inten.shape)]
    assert ring == pytest.approx(np.sqrt(5 / 2) * f.grid.default_waist(), rel=0.05)
    # phase winds 5 times around a circle inside the ring
    t = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    rad = ring / f.grid.pitch
    vals = ndimage.map_coordinates(np.angle(f.samples), [64 + rad * np.sin(t), 64 + rad * np.cos(t)], order=0)
    winding = np.sum(np.angle(np.exp(1j * np.diff(np.r_[vals, vals[0]])))) / (2 * np.pi)
    assert round(winding) == 5


def test_gaussian_mode_has_flat_phase():
    f = synthesize(ComplexSpectrum.single(B10, 0), G64)
    assert np.allclose(np.angle(f.samples), 0.0)
    assert np.allclose(np.abs(f.samples), np.abs(f.samples).T)


def test_synthesis_matches_closed_form():
    spec = ComplexSpectrum.from_weights(B5, np.r_[0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0])
    f = synthesize(spec, GridSpec(128, 0.5))
    X, Y = f.grid.mesh()
    w0 = f.grid.default_waist()
    ref = (oracles.vortex_mode(-4, X, Y, w0) + oracles.vortex_mode(-1, X, Y, w0)) / np.sqrt(2)
    assert np.abs(f.samples - ref).max() < 1e-6 * np.abs(ref).max()


def test_pupil_error():
    with pytest.raises(PupilError):
        synthesize(ComplexSpectrum.single(B5, 1), G64, w0=8.5)
    with pytest.raises(ValueError):
        synthesize(ComplexSpectrum.single(B5, 1), G64, w0=0.0)


@pytest.mark.parametrize("ell", range(-5, 6))
def test_orthogonality(ell):
    _, spec = oam_decompose(synthesize(ComplexSpectrum.single(B5, ell), G64), B5)
    expected = np.zeros(11)
    expected[B5.index(ell)] = 1
    assert np.abs(spec.weights - expected).max() < 1e-6


def test_two_mode_equal_split():
    spec = ComplexSpectrum.from_weights(B10, np.isin(B10.ells, [-4, -1]).astype(float))
    cs, s = oam_decompose(synthesize(spec, GridSpec(200, 0.5)), B10)
    assert s[-4] == pytest.approx(0.5, abs=1e-6)
    assert s[-1] == pytest.approx(0.5, abs=1e-6)


def test_round_trip_twenty_spectra():
    rng = np.random.default_rng(7)
    for _ in range(20):
        spec = random_spectrum(rng, B5)
        cs, s = oam_decompose(synthesize(spec, G64), B5)
        assert np.abs(s.weights - spec.weights).max() < 1e-6
        big = spec.amplitudes > 0.1
        err = np.angle(np.exp(1j * (cs.phases - spec.phases)))[big]
        assert np.abs(err).max() < 2e-4


def test_parseval_against_field_power():
    rng = np.random.default_rng(3)
    spec = random_spectrum(rng, B5)
    f = synthesize(spec, G64)
    from oamspec.field import harmonic_powers

    powers, _ = harmonic_powers(f.samples, f.grid)
    assert powers.sum() == pytest.approx(f.power, abs=1e-6)


def test_decomposition_against_polar_quadrature():
    # off-center Gaussian: its azimuthal spectrum is known only numerically
    w0 = G64.default_waist()

    def shifted(x, y):
        return oracles.vortex_mode(1, x - 0.3 * w0, y, w0)

    X, Y = G64.mesh()
    ref = oracles.normalized_polar_weights(shifted, B5.ells, r_max=16.0)
    got = decompose_weights(shifted(X, Y)[None], G64, B5)[0]
    assert np.abs(got - ref).max() < 1e-6


def test_capture_warning():
    f = synthesize(ComplexSpectrum.single(B10, 8), G64)
    with pytest.warns(CapturedPowerWarning):
        oam_decompose(f, B5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        oam_decompose(synthesize(ComplexSpectrum.single(B5, 2), G64), B5)


def test_zero_field_rejected():
    with pytest.raises(ValueError):
        oam_decompose(ComplexField(G64, np.zeros((64, 64))), B5)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=11, max_size=11).filter(lambda w: sum(w) > 1e-3),
       st.lists(st.floats(-np.pi, np.pi), min_size=11, max_size=11))
def test_synthesis_unit_power_and_round_trip(weights, phases):
    spec = ComplexSpectrum.from_weights(B5, weights, phases)
    f = synthesize(spec, G64)
    assert f.power == pytest.approx(1.0, abs=1e-9)
    assert np.abs(decompose_weights(f.samples[None], G64, B5)[0] - spec.weights).max() < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.floats(-np.pi, np.pi), st.integers(0, 2**31 - 1))
def test_rotation_leaves_weights_unchanged(delta, seed):
    # rotate analytically: c_l -> c_l exp(-j l delta)
    rng = np.random.default_rng(seed)
    spec = random_spectrum(rng, B5)
    rotated = ComplexSpectrum(B5, spec.amplitudes, spec.phases - B5.ells * delta)
    a = decompose_weights(synthesize(spec, G64).samples[None], G64, B5)
    b = decompose_weights(synthesize(rotated, G64).samples[None], G64, B5)
    assert np.abs(a - b).max() < 1e-6


def test_batch_synthesis_matches_single():
    rng = np.random.default_rng(1)
    specs = [random_spectrum(rng, B5) for _ in range(3)]
    batch = synthesize_batch(np.array([s.coefficients for s in specs]), B5, G64)
    for s, u in zip(specs, batch):
        assert np.allclose(synthesize(s, G64).samples, u, atol=1e-14)
    assert np.allclose(field_power(batch, G64), 1.0)


# -- phase-shift interferometry and preprocessing ---------------------------------------

def test_reconstruct_unit_signal():
    g = GridSpec(8)
    frames = phase_shift_frames(ComplexField(g, np.ones((8, 8))), 1.0)
    assert [f[0, 0] for f in frames] == pytest.approx([4, 2, 0, 2])
    assert np.allclose(phase_shift_reconstruct(*frames, 1.0).samples, 1.0)


def test_reconstruct_dark_signal():
    g = GridSpec(8)
    frames = [np.full((8, 8), 2.25)] * 4
    assert np.all(phase_shift_reconstruct(*frames, 1.5, g).samples == 0)


def test_reconstruct_vortex_round_trip():
    f = synthesize(random_spectrum(np.random.default_rng(5), B5), G64)
    a_ref = 0.8
    rec = phase_shift_reconstruct(*phase_shift_frames(f, a_ref), a_ref, G64)
    assert np.abs(rec.samples - f.samples).max() < 1e-10


def test_reconstruct_errors():
    with pytest.raises(ValueError):
        phase_shift_reconstruct(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((10, 10)), 1.0)
    with pytest.raises(ValueError):
        phase_shift_reconstruct(*[np.zeros((8, 8))] * 4, 0.0)


def test_preprocess_constant_image():
    out = preprocess_frames(np.full((1024, 1280), 3.25))
    assert out.shape == (200, 200)
    assert np.allclose(out, 3.25, atol=1e-4)


def test_preprocess_crop_bounds():
    with pytest.raises(ValueError):
        preprocess_frames(np.zeros((500, 800)))


def test_preprocess_impulse_matches_gaussian_kernel():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    out = preprocess_frames(img, crop_side=41, out_side=41, blur_sigma=1.5)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    # direct separable kernel truncated at 4 sigma, as the reference
    x = np.arange(-6, 7)
    k = np.exp(-(x**2) / (2 * 1.5**2))
    k /= k.sum()
    ref = np.zeros((41, 41))
    ref[14:27, 14:27] = np.outer(k, k)
    assert np.abs(out - ref).max() < 1e-12
