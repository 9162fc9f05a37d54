"""Analytic gradients of the hybrid model and a finite-difference verifier.

The optical part is differentiated with a matrix-free reverse sweep: the
transposed products of diffraction and modulation matrices are applied as
adjoint propagations, never materialized.

Complex gradients follow one convention: for a complex variable ``x`` the
stored gradient ``g`` satisfies ``dL = Re(sum(conj(g) * dx))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .optics import ForwardTrace, OpticalStack
from .readout import ReadoutNetwork, ReadoutTrace


@dataclass
class GradientBundle:
    deltas: list[np.ndarray] = dc_field(default_factory=list)
    d_weights: list[np.ndarray] = dc_field(default_factory=list)
    d_biases: list[np.ndarray] = dc_field(default_factory=list)
    d_detector: np.ndarray | None = None
    d_transmission: list[np.ndarray] = dc_field(default_factory=list)
    d_phase: list[np.ndarray] = dc_field(default_factory=list)
    d_theta: list[np.ndarray] = dc_field(default_factory=list)


def softmax_backward(s: np.ndarray, grad_s: np.ndarray, temperature: float) -> np.ndarray:
    """Vector-Jacobian product of ``softmax(z / T)`` (full Jacobian)."""
    return s * (grad_s - np.sum(s * grad_s, axis=-1, keepdims=True)) / temperature


def backward_electronic(net: ReadoutNetwork, trace: ReadoutTrace, grad_output: np.ndarray):
    """Back-propagate through the readout.

    ``grad_output`` has shape ``(B, output_dim)``: dL/d(spectrum) in the first
    ``count`` columns, and in complex mode dL/d(u, v) in the remaining ones
    (those outputs are the raw affine values, so their delta is the gradient
    itself).

    Returns ``(deltas, d_weights, d_biases)`` with gradients summed over the batch.
    """
    if trace is None or not trace.pre:
        raise ValueError("backward_electronic needs the trace of a forward pass")
    k = net.basis_count
    z_out = trace.pre[-1]
    grad_output = np.asarray(grad_output)
    if grad_output.shape != z_out.shape:
        raise ValueError(f"output gradient shape {grad_output.shape} != network output {z_out.shape}")
    s = trace.spectrum
    if s is None:
        from .readout import temperature_softmax
        s = temperature_softmax(z_out[:, :k], net.temperature)
    delta = np.empty_like(z_out)
    delta[:, :k] = softmax_backward(s, grad_output[:, :k], net.temperature)
    delta[:, k:] = grad_output[:, k:]

    n_layers = len(net.weights)
    deltas = [None] * n_layers
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    deltas[-1] = delta
    for q in range(n_layers - 1, -1, -1):
        a_prev = trace.acts[q - 1] if q > 0 else trace.inputs
        d_w[q] = deltas[q].T @ a_prev
        d_b[q] = deltas[q].sum(axis=0)
        if q > 0:
            deltas[q - 1] = (deltas[q] @ net.weights[q]) * (trace.pre[q - 1] > 0)
    return deltas, d_w, d_b


def backward_to_detector(net: ReadoutNetwork, delta_1: np.ndarray) -> np.ndarray:
    """``dL/dA_0 = W_1^T delta_1``, one row per sample."""
    return np.asarray(delta_1) @ net.weights[0]


def backward_optical(stack: OpticalStack, trace: ForwardTrace, grad_detector: np.ndarray):
    """Gradients of the loss w.r.t. every layer's transmission, phase and theta.

    ``grad_detector`` is dL/dA_0 with the detector's shape (leading batch axes
    allowed); results are summed over the batch.

    Returns ``(d_transmission, d_phase, d_theta)``, lists indexed by layer.
    """
    if trace is None or trace.output is None or len(trace) != stack.n_layers:
        raise ValueError("trace does not belong to this stack (missing output or wrong depth)")
    n = stack.grid.n
    g_a = np.asarray(grad_detector).reshape(trace.output.shape)
    hop = stack.hop
    # dL = 2 Re sum conj(G) dE at every plane, starting from A_0 = |E|^2
    g = hop.apply(g_a * trace.output, adjoint=True)
    batch_axes = tuple(range(g.ndim - 2))
    d_t, d_phi, d_theta = [None] * stack.n_layers, [None] * stack.n_layers, [None] * stack.n_layers
    for p in range(stack.n_layers - 1, -1, -1):
        layer = stack.layers[p]
        t = layer.transmission
        pre = trace.pre[p]
        d_t[p] = np.sum(2 * g * np.conj(pre), axis=batch_axes).reshape(n, n)
        d_phi[p] = np.real(1j * t * np.conj(d_t[p]))
        d_theta[p] = layer.phase_derivative() * d_phi[p]
        if p > 0:
            g = hop.apply(np.conj(t).astype(g.dtype, copy=False) * g, adjoint=True)
    return d_t, d_phi, d_theta


def finite_difference_check(model, inputs, loss_fn, step: float = 1e-4, samples: int = 200,
                            rng=None, classes=("W", "B", "theta"), floor: float = 1e-6):
    """Compare analytic gradients against central differences.

    ``model`` exposes ``parameters()`` (name -> array, mutable in place) and
    ``loss_and_grads(inputs) -> (loss, {name: grad})``; ``loss_fn(model,
    inputs) -> float`` re-evaluates the loss. ``samples`` entries are drawn
    uniformly across the requested parameter classes.

    The relative error of one entry is ``|g_a - g_fd| / max(|g_a|, |g_fd|,
    floor * max|g_a|)`` where the maximum runs over the entry's class.
    Returns ``(worst_relative_error, records)``.
    """
    rng = np.random.default_rng(rng)
    params = model.parameters()
    _, grads = model.loss_and_grads(inputs)
    by_class = {c: [k for k in params if _param_class(k) == c] for c in classes}
    by_class = {c: ks for c, ks in by_class.items() if ks}
    scale = {c: max(float(np.max(np.abs(grads[k]))) for k in ks) for c, ks in by_class.items()}
    records = []
    names = sorted(by_class)
    for i in range(samples):
        cls = names[i % len(names)]
        key = by_class[cls][rng.integers(len(by_class[cls]))]
        arr = params[key]
        idx = tuple(int(rng.integers(d)) for d in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        up = loss_fn(model, inputs)
        arr[idx] = orig - step
        down = loss_fn(model, inputs)
        arr[idx] = orig
        fd = (up - down) / (2 * step)
        an = float(grads[key][idx])
        denom = max(abs(an), abs(fd), floor * scale[cls], 1e-300)
        records.append((key, idx, an, fd, abs(an - fd) / denom))
    worst = max(r[-1] for r in records) if records else 0.0
    return worst, records


def _param_class(name: str) -> str:
    return name.split(".")[0]
