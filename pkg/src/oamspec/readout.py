"""Electronic readout: fully connected ReLU layers and a temperature softmax.

In ``complex`` mode the last layer has ``3 * count`` outputs: the first
``count`` feed the softmax weight head, the remaining ``2 * count`` are read
as ``(u_l, v_l)`` pairs giving the intermodal phase ``atan2(v_l, u_l)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import ComplexSpectrum, SpectrumBasis, reference_phases

DEFAULT_TEMPERATURE = 10 ** -1.2


@dataclass
class ReadoutTrace:
    inputs: np.ndarray  # A_0, flattened
    pre: list[np.ndarray] = dc_field(default_factory=list)  # z_q
    acts: list[np.ndarray] = dc_field(default_factory=list)  # A_q for q < N
    spectrum: np.ndarray | None = None


@dataclass
class ReadoutNetwork:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    temperature: float = DEFAULT_TEMPERATURE
    head: str = "power"
    basis_count: int = 21

    def __post_init__(self):
        if self.head not in ("power", "complex"):
            raise ValueError(f"unknown head mode {self.head!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for q, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {q}: bias shape {b.shape} does not match weights {w.shape}")
            if q and w.shape[1] != self.weights[q - 1].shape[0]:
                raise ValueError(f"layer {q} expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.weights[q - 1].shape[0]}")
        if self.weights[-1].shape[0] != self.output_dim:
            raise ValueError(f"last layer has {self.weights[-1].shape[0]} outputs, "
                             f"{self.head} head needs {self.output_dim}")

    @property
    def output_dim(self) -> int:
        return self.basis_count * (3 if self.head == "complex" else 1)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def create(cls, input_dim: int, basis_count: int, hidden=(256,), temperature=DEFAULT_TEMPERATURE,
               head: str = "power", rng=None, dtype=np.float64) -> "ReadoutNetwork":
        """He-initialized network with zero biases."""
        rng = np.random.default_rng(rng)
        out = basis_count * (3 if head == "complex" else 1)
        dims = [input_dim, *hidden, out]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append((rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, temperature, head, basis_count)

    def copy(self) -> "ReadoutNetwork":
        return ReadoutNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.temperature, self.head, self.basis_count)


def relu(z):
    return np.maximum(z, 0)


def forward_readout(net: ReadoutNetwork, a0, trace: bool = False):
    """Evaluate ``z_q = W_q A_{q-1} + B_q`` with ReLU between layers.

    ``a0`` is one detector image or a batch ``(B, n, n)`` / ``(B, n*n)``;
    returns ``z_N`` with a leading batch axis, and a :class:`ReadoutTrace`
    when ``trace`` is set.
    """
    a = np.asarray(a0)
    a = a.reshape(1, -1) if a.size == net.input_dim else a.reshape(len(a), -1)
    if a.shape[1] != net.input_dim:
        raise ValueError(f"readout expects {net.input_dim} inputs, got {a.shape[1]}")
    tr = ReadoutTrace(a) if trace else None
    last = len(net.weights) - 1
    for q, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        if tr is not None:
            tr.pre.append(z)
        if q < last:
            a = relu(z)
            if tr is not None:
                tr.acts.append(a)
    return (z, tr) if trace else z


def temperature_softmax(z, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def split_heads(net: ReadoutNetwork, z: np.ndarray):
    """Return ``(weights, phases)``; phases is None for the power head."""
    k = net.basis_count
    s = temperature_softmax(z[..., :k], net.temperature)
    if net.head == "power":
        return s, None
    u, v = z[..., k::2], z[..., k + 1::2]
    return s, np.arctan2(v, u)


def predict(net: ReadoutNetwork, a0):
    return split_heads(net, forward_readout(net, a0))


def forward_complex(net: ReadoutNetwork, a0, basis: SpectrumBasis) -> ComplexSpectrum | list[ComplexSpectrum]:
    """Complex spectrum from the dual head, phases re-referenced."""
    if net.head != "complex":
        raise ValueError("forward_complex needs a network in complex mode")
    if basis.count != net.basis_count:
        raise ValueError(f"basis has {basis.count} components, network predicts {net.basis_count}")
    w, ph = predict(net, a0)
    out = []
    for wi, pi in zip(w, ph):
        amp = np.sqrt(wi / wi.sum())
        amp /= np.sqrt(np.sum(amp**2))
        out.append(ComplexSpectrum(basis, amp, reference_phases(amp, pi, basis)))
    return out[0] if len(out) == 1 else out
