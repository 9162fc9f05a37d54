import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from oamspec.field import ComplexField, ComplexSpectrum, GridSpec, SpectrumBasis, synthesize
from oamspec.optics import DiffractiveLayer, OpticalStack, detect, forward_optical, layer_modulate
from oamspec.propagation import make_operator

G = GridSpec(32, 0.5)


def beam(grid=G):
    return synthesize(ComplexSpectrum.from_weights(SpectrumBasis(-2, 2), [1, 0, 1, 2, 0], [0, 0, 0, 1, 0]), grid)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0.0, 3.0), st.floats(0.0, 10.0))
def test_phase_range(theta, alpha, beta):
    layer = DiffractiveLayer(np.full((2, 2), theta), alpha, beta)
    assert np.all(layer.phase >= -1e-12)
    assert np.all(layer.phase <= 2 * alpha * np.pi + 1e-12)
    assert np.allclose(np.abs(layer.transmission), 1.0)


def test_zero_theta_negates_field():
    f = beam()
    out = layer_modulate(f, DiffractiveLayer(np.zeros((32, 32))))
    assert np.allclose(out.samples, -f.samples, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_modulation_preserves_modulus(seed):
    rng = np.random.default_rng(seed)
    f = beam()
    out = layer_modulate(f, DiffractiveLayer(rng.uniform(-5, 5, (32, 32)), 1.0, 3.0))
    assert np.allclose(np.abs(out.samples), np.abs(f.samples), atol=1e-15)
    assert out.power == pytest.approx(f.power, rel=1e-12)


def test_modulate_grid_mismatch():
    with pytest.raises(ValueError):
        layer_modulate(beam(), DiffractiveLayer(np.zeros((16, 16))))


def test_single_layer_composition():
    stack = OpticalStack.create(G, n_layers=1, distance=6.0)
    f = beam()
    hop = make_operator(G, 6.0)
    expected = -hop.apply(hop.apply(f.samples))
    out = forward_optical(stack, f)
    assert np.allclose(out.samples, expected, atol=1e-14)
    assert out.z == pytest.approx(12.0)


def test_identity_layers_are_free_space():
    g = GridSpec(64, 0.5)
    stack = OpticalStack.create(g, n_layers=3, distance=2.0, alpha=0.0)
    f = beam(g)
    out = forward_optical(stack, f.samples)
    # the charge-2 tail touches the rim at ~1e-6 and is cropped once per hop
    assert np.abs(out - make_operator(g, 8.0).apply(f.samples)).max() < 1e-6


def test_energy_conservation_random_stack():
    g = GridSpec(64, 0.5)
    rng = np.random.default_rng(2)
    stack = OpticalStack.create(g, n_layers=5, distance=6.0)
    for layer in stack.layers:
        # smooth masks keep the light inside the aperture, like a trained stack
        layer.theta[...] = ndimage.gaussian_filter(rng.standard_normal(layer.theta.shape), 4.0, mode="wrap")
    out = forward_optical(stack, beam(g))
    assert abs(out.power - 1) < 1e-3


def test_trace_contents_and_determinism():
    rng = np.random.default_rng(3)
    stack = OpticalStack.create(G, n_layers=2, distance=5.0)
    for layer in stack.layers:
        layer.theta[...] = rng.standard_normal(layer.theta.shape)
    f = beam()
    out1, tr1 = forward_optical(stack, f.samples, keep_trace=True)
    out2, tr2 = forward_optical(stack, f.samples, keep_trace=True)
    assert len(tr1) == 2
    assert np.array_equal(out1, out2)
    for a, b in zip(tr1.pre + tr1.post, tr2.pre + tr2.post):
        assert np.array_equal(a, b)
    assert np.allclose(tr1.post[0], tr1.pre[0] * stack.layers[0].transmission)
    assert np.array_equal(tr1.detector, detect(out1))
    assert np.sum(tr1.detector) * G.pitch**2 == pytest.approx(np.sum(np.abs(out1) ** 2) * G.pitch**2, rel=1e-12)


def test_batch_matches_single():
    rng = np.random.default_rng(4)
    stack = OpticalStack.create(G, n_layers=2, distance=5.0)
    for layer in stack.layers:
        layer.theta[...] = rng.standard_normal(layer.theta.shape)
    fields = np.stack([beam().samples, np.roll(beam().samples, 2, axis=1)])
    batch = forward_optical(stack, fields)
    for i in range(2):
        assert np.allclose(batch[i], forward_optical(stack, fields[i]), atol=1e-14)


def test_detect_examples():
    assert np.all(detect(np.ones((4, 4), complex)) == 1)
    assert np.allclose(detect(np.full((4, 4), 3j)), 9)
    rng = np.random.default_rng(0)
    e = ComplexField(G, rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32)))
    assert np.sum(detect(e)) * G.pitch**2 == pytest.approx(e.power, rel=1e-12)
    assert np.all(detect(e) >= 0)


def test_stack_validation():
    with pytest.raises(ValueError):
        OpticalStack(G, [])
    with pytest.raises(ValueError):
        OpticalStack(G, [DiffractiveLayer(np.zeros((8, 8)))])
    with pytest.raises(ValueError):
        forward_optical(OpticalStack.create(G, 1), ComplexField(GridSpec(16), np.ones((16, 16))))
