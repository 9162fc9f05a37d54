"""The hybrid model: optical stack, square-law detector and electronic readout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backprop import GradientBundle, backward_electronic, backward_optical, backward_to_detector
from .field import GridSpec, SpectrumBasis
from .optics import OpticalStack, forward_optical
from .readout import ReadoutNetwork, forward_readout, split_heads


@dataclass
class Batch:
    fields: np.ndarray  # (B, n, n) complex
    weights: np.ndarray  # (B, count) label spectra
    phases: np.ndarray | None = None  # (B, count) referenced label phases, complex head only
    l2: float = 0.0


def spectrum_loss(pred, label, pred_uv=None, label_phases=None):
    """Data term and its gradient w.r.t. the raw network outputs.

    Mean squared error over all spectrum entries of the batch; when phases
    are given, adds ``mean_b sum_l s_l (1 - cos(phi_hat_l - phi_l))``.
    Returns ``(loss, grad_spectrum, grad_uv)``.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {label.shape}")
    diff = pred - label
    loss = float(np.mean(diff**2))
    grad_s = 2 * diff / diff.size
    grad_uv = None
    if pred_uv is not None and label_phases is not None:
        u, v = pred_uv[..., 0::2], pred_uv[..., 1::2]
        r2 = np.maximum(u**2 + v**2, 1e-300)
        err = np.arctan2(v, u) - label_phases
        b = len(label)
        loss += float(np.sum(label * (1 - np.cos(err)))) / b
        g_phi = label * np.sin(err) / b
        grad_uv = np.empty_like(pred_uv, dtype=float)
        grad_uv[..., 0::2] = -g_phi * v / r2
        grad_uv[..., 1::2] = g_phi * u / r2
    return loss, grad_s, grad_uv


def default_detector_gain(grid: GridSpec) -> float:
    """``n^2 / 64``: a unit-power beam then feeds the readout with mean pixel value ``1 / (16 pitch^2)``."""
    return grid.n**2 / 64


@dataclass
class HybridModel:
    grid: GridSpec
    basis: SpectrumBasis
    stack: OpticalStack
    readout: ReadoutNetwork
    detector_gain: float = 1.0  # fixed scale between detected intensity and readout input

    def __post_init__(self):
        if not self.detector_gain > 0:
            raise ValueError("detector gain must be positive")
        if self.stack.grid != self.grid:
            raise ValueError("stack grid differs from model grid")
        if self.readout.input_dim != self.grid.n**2:
            raise ValueError(f"readout takes {self.readout.input_dim} inputs, detector has {self.grid.n ** 2}")
        if self.readout.basis_count != self.basis.count:
            raise ValueError("readout output size does not match the basis")

    @classmethod
    def create(cls, grid: GridSpec, basis: SpectrumBasis, n_layers=5, distance=40.0, alpha=1.0, beta=3.0,
               hidden=(256,), temperature=10 ** -1.2, head="power", pad_factor=2, rng=None,
               dtype=np.float64, detector_gain=None, output_init_scale=1.0) -> "HybridModel":
        """Fresh model; ``detector_gain=None`` picks :func:`default_detector_gain`.

        ``output_init_scale`` shrinks the last readout layer so the softmax starts unsaturated.
        """
        stack = OpticalStack.create(grid, n_layers, distance, alpha, beta, pad_factor, dtype=dtype)
        readout = ReadoutNetwork.create(grid.n**2, basis.count, hidden, temperature, head, rng, dtype=dtype)
        readout.weights[-1] *= np.asarray(output_init_scale, dtype=readout.weights[-1].dtype)
        gain = default_detector_gain(grid) if detector_gain is None else float(detector_gain)
        return cls(grid, basis, stack, readout, gain)

    @property
    def head(self) -> str:
        return self.readout.head

    def copy(self) -> "HybridModel":
        return HybridModel(self.grid, self.basis, self.stack.copy(), self.readout.copy(), self.detector_gain)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``theta.p``, ``W.q``, ``B.q``."""
        out = {f"theta.{p}": layer.theta for p, layer in enumerate(self.stack.layers)}
        for q, (w, b) in enumerate(zip(self.readout.weights, self.readout.biases)):
            out[f"W.{q}"] = w
            out[f"B.{q}"] = b
        return out

    def detector_images(self, fields) -> np.ndarray:
        _, tr = forward_optical(self.stack, fields, keep_trace=True)
        return tr.detector

    def forward(self, fields, trace: bool = False):
        """Return ``(spectra, phases)``; phases is None for the power head.

        With ``trace`` also returns the optical and readout traces.
        """
        _, otr = forward_optical(self.stack, fields, keep_trace=True)
        z, rtr = forward_readout(self.readout, self.detector_gain * otr.detector, trace=True)
        s, phases = split_heads(self.readout, z)
        rtr.spectrum = s
        if trace:
            return s, phases, otr, rtr
        return s, phases

    def predict(self, fields, chunk: int = 250):
        spectra, phases = [], []
        for i in range(0, len(fields), chunk):
            s, ph = self.forward(fields[i:i + chunk])
            spectra.append(s)
            if ph is not None:
                phases.append(ph)
        return np.concatenate(spectra), (np.concatenate(phases) if phases else None)

    def regularization(self) -> float:
        return float(sum(np.sum(np.asarray(a, dtype=float) ** 2) for a in self.parameters().values()))

    def loss(self, batch: Batch) -> float:
        s, _, _, rtr = self.forward(batch.fields, trace=True)
        uv = rtr.pre[-1][:, self.basis.count:] if self.head == "complex" else None
        data, _, _ = spectrum_loss(s, batch.weights, uv, batch.phases if uv is not None else None)
        return data + batch.l2 * self.regularization()

    def loss_and_grads(self, batch: Batch, bundle: bool = False):
        """Loss of one batch and the gradient of every parameter (summed over the batch)."""
        s, _, otr, rtr = self.forward(batch.fields, trace=True)
        k = self.basis.count
        uv = rtr.pre[-1][:, k:] if self.head == "complex" else None
        data, grad_s, grad_uv = spectrum_loss(s, batch.weights, uv, batch.phases if uv is not None else None)
        grad_out = np.zeros_like(rtr.pre[-1], dtype=float)
        grad_out[:, :k] = grad_s
        if grad_uv is not None:
            grad_out[:, k:] = grad_uv
        deltas, d_w, d_b = backward_electronic(self.readout, rtr, grad_out)
        d_a0 = self.detector_gain * backward_to_detector(self.readout, deltas[0])
        d_t, d_phi, d_theta = backward_optical(self.stack, otr, d_a0)
        params = self.parameters()
        grads = {}
        for p, g in enumerate(d_theta):
            grads[f"theta.{p}"] = g
        for q, (gw, gb) in enumerate(zip(d_w, d_b)):
            grads[f"W.{q}"] = gw
            grads[f"B.{q}"] = gb
        loss = data
        if batch.l2:
            loss += batch.l2 * self.regularization()
            for key, g in grads.items():
                grads[key] = g + 2 * batch.l2 * params[key]
        if bundle:
            return loss, grads, GradientBundle(deltas, d_w, d_b, d_a0, d_t, d_phi, d_theta)
        return loss, grads
