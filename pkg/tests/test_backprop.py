import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oamspec.backprop import (backward_electronic, backward_optical, backward_to_detector,
                              finite_difference_check, softmax_backward)
from oamspec.field import GridSpec, SpectrumBasis
from oamspec.model import Batch, HybridModel
from oamspec.optics import OpticalStack, forward_optical
from oamspec.readout import ReadoutNetwork, forward_readout, temperature_softmax
from oamspec.training import draw_weights, make_split

from . import oracles


def small_model(head="power", n=16, layers=2, hidden=(8,), seed=0, gain=1.0):
    g = GridSpec(n, 0.5)
    rng = np.random.default_rng(seed)
    m = HybridModel.create(g, SpectrumBasis(-2, 2), n_layers=layers, distance=3.0, hidden=hidden,
                           temperature=0.3, head=head, rng=rng, detector_gain=gain)
    for layer in m.stack.layers:
        layer.theta[...] = rng.uniform(-1, 1, layer.theta.shape)
    for b in m.readout.biases:
        b[...] = rng.normal(0, 0.1, b.shape)
    return m


def small_batch(model, size=4, seed=1, l2=0.0, with_phases=False):
    ds = make_split(np.random.default_rng(seed), model.basis, model.grid, 2.0, size, 1, "train",
                    dtype=np.complex128)
    return Batch(ds.fields, ds.weights, ds.phases if with_phases else None, l2)


def test_optical_gradient_matches_dense_oracle():
    n = 8
    g = GridSpec(n, 0.5)
    rng = np.random.default_rng(5)
    stack = OpticalStack.create(g, n_layers=3, distance=1.5, alpha=1.0, beta=2.0)
    for layer in stack.layers:
        layer.theta[...] = rng.uniform(-1, 1, (n, n))
    e0 = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    weights = rng.standard_normal((n, n))
    out, tr = forward_optical(stack, e0, keep_trace=True)
    d_t, d_phi, d_theta = backward_optical(stack, tr, weights)
    Dm = oracles.dense_asm_matrix(n, 0.5, 1.5)
    ref, e_out = oracles.dense_phase_gradient(Dm, [l.phase for l in stack.layers], e0, weights)
    assert np.allclose(e_out.reshape(n, n), out, atol=1e-12)
    for p, layer in enumerate(stack.layers):
        assert np.allclose(d_phi[p], ref[p], atol=1e-10)
        assert np.allclose(d_theta[p], layer.phase_derivative() * ref[p], atol=1e-10)


def test_softmax_backward_matches_jacobian():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(5)
    t = 0.4
    s = temperature_softmax(z, t)
    jac = (np.diag(s) - np.outer(s, s)) / t
    g = rng.standard_normal(5)
    assert np.allclose(softmax_backward(s, g, t), jac.T @ g)


def test_electronic_gradients_by_finite_differences():
    rng = np.random.default_rng(2)
    net = ReadoutNetwork.create(10, 4, (6, 5), 0.5, "power", 3)
    for b in net.biases:
        b[...] = rng.normal(0, 0.2, b.shape)
    a0 = rng.random((3, 10))
    label = np.array([draw_weights(rng, 4) for _ in range(3)])

    def loss():
        s = temperature_softmax(forward_readout(net, a0), net.temperature)
        return np.mean((s - label) ** 2)

    z, tr = forward_readout(net, a0, trace=True)
    s = temperature_softmax(z, net.temperature)
    tr.spectrum = s
    deltas, d_w, d_b = backward_electronic(net, tr, 2 * (s - label) / s.size)
    h = 1e-6
    for q in range(3):
        for arr, grad in ((net.weights[q], d_w[q]), (net.biases[q], d_b[q])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss()
                arr[idx] = orig - h
                down = loss()
                arr[idx] = orig
                assert grad[idx] == pytest.approx((up - down) / (2 * h), abs=1e-8)
    # detector gradient
    g_a = backward_to_detector(net, deltas[0])
    for i in range(3):
        for j in range(10):
            orig = a0[i, j]
            a0[i, j] = orig + h
            up = loss()
            a0[i, j] = orig - h
            down = loss()
            a0[i, j] = orig
            assert g_a[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-8)


def test_missing_trace_rejected():
    net = ReadoutNetwork.create(4, 3, (), 1.0)
    with pytest.raises(ValueError):
        backward_electronic(net, None, np.zeros((1, 3)))
    stack = OpticalStack.create(GridSpec(8), 2, 1.0)
    _, tr = forward_optical(stack, np.ones((8, 8), complex), keep_trace=True)
    tr.output = None
    with pytest.raises(ValueError):
        backward_optical(stack, tr, np.zeros((8, 8)))


@pytest.mark.parametrize("head", ["power", "complex"])
def test_full_model_finite_difference(head):
    m = small_model(head)
    batch = small_batch(m, with_phases=head == "complex", l2=1e-3)
    worst, records = finite_difference_check(m, batch, lambda model, b: model.loss(b), step=1e-5, samples=90,
                                             rng=0)
    assert len(records) == 90
    assert {r[0].split(".")[0] for r in records} == {"W", "B", "theta"}
    assert worst < 1e-4


def test_detector_gain_enters_gradients():
    m = small_model(gain=16.0)
    batch = small_batch(m)
    worst, _ = finite_difference_check(m, batch, lambda model, b: model.loss(b), step=1e-5, samples=60, rng=1)
    assert worst < 1e-4


def test_gradient_shapes_match_parameters():
    m = small_model(layers=3, hidden=(7, 5))
    _, grads, bundle = m.loss_and_grads(small_batch(m), bundle=True)
    params = m.parameters()
    assert set(grads) == set(params)
    for k in params:
        assert grads[k].shape == params[k].shape
    assert len(bundle.d_theta) == 3 and len(bundle.d_weights) == 3


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_small_step_decreases_loss(seed):
    m = small_model(seed=seed % 1000)
    batch = small_batch(m, seed=seed)
    loss, grads = m.loss_and_grads(batch)
    params = m.parameters()
    norm2 = sum(np.sum(g**2) for g in grads.values())
    lr = 1e-3 / max(np.sqrt(norm2), 1e-12)
    for k, g in grads.items():
        params[k] -= lr * g
    assert m.loss(batch) < loss
