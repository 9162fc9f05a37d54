"""Phase-only diffractive layers, the cascaded optical stack and the detector."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import ComplexField, GridSpec
from .propagation import PropagationOperator, make_operator


@dataclass
class DiffractiveLayer:
    """Trainable phase mask ``phi = alpha * pi * (sin(beta * theta) + 1)``."""

    theta: np.ndarray
    alpha: float = 1.0
    beta: float = 3.0

    @property
    def phase(self) -> np.ndarray:
        return self.alpha * np.pi * (np.sin(self.beta * self.theta) + 1.0)

    @property
    def transmission(self) -> np.ndarray:
        return np.exp(1j * self.phase)

    def phase_derivative(self) -> np.ndarray:
        """d phi / d theta, elementwise."""
        return self.alpha * self.beta * np.pi * np.cos(self.beta * self.theta)


@dataclass
class OpticalStack:
    grid: GridSpec
    layers: list[DiffractiveLayer]
    distance: float = 40.0
    pad_factor: int = 2

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("an optical stack needs at least one layer")
        for p, layer in enumerate(self.layers):
            if layer.theta.shape != (self.grid.n, self.grid.n):
                raise ValueError(f"layer {p} has shape {layer.theta.shape}, stack grid is n={self.grid.n}")

    @classmethod
    def create(cls, grid: GridSpec, n_layers: int = 5, distance: float = 40.0, alpha: float = 1.0,
               beta: float = 3.0, pad_factor: int = 2, dtype=np.float64) -> "OpticalStack":
        layers = [DiffractiveLayer(np.zeros((grid.n, grid.n), dtype=dtype), alpha, beta)
                  for _ in range(n_layers)]
        return cls(grid, layers, distance, pad_factor)

    @property
    def hop(self) -> PropagationOperator:
        return make_operator(self.grid, self.distance, self.pad_factor)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "OpticalStack":
        return replace(self, layers=[replace(l, theta=l.theta.copy()) for l in self.layers])


@dataclass
class ForwardTrace:
    """Intermediate fields of one forward pass, kept for the reverse sweep.

    ``pre[p]`` is the field arriving at layer p (before modulation), ``post[p]``
    the field leaving it, ``output`` the field on the detector plane.
    """

    pre: list[np.ndarray] = dc_field(default_factory=list)
    post: list[np.ndarray] = dc_field(default_factory=list)
    output: np.ndarray | None = None
    detector: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.pre)


def _samples(field):
    return (field.samples, field) if isinstance(field, ComplexField) else (np.asarray(field), None)


def layer_modulate(field, layer: DiffractiveLayer):
    u, wrapped = _samples(field)
    if u.shape[-2:] != layer.theta.shape:
        raise ValueError(f"field shape {u.shape[-2:]} does not match layer shape {layer.theta.shape}")
    t = layer.transmission.astype(u.dtype if np.iscomplexobj(u) else complex, copy=False)
    out = u * t
    return replace(wrapped, samples=out) if wrapped is not None else out


def forward_optical(stack: OpticalStack, e0, keep_trace: bool = False):
    """Run ``E_{M+1} = D (prod_p diag(T_p) D) E_0`` over one field or a batch.

    Accepts a :class:`ComplexField` or an array whose last two axes are the
    grid; returns the same kind, plus a :class:`ForwardTrace` when asked.
    """
    u, wrapped = _samples(e0)
    if wrapped is not None and wrapped.grid != stack.grid:
        raise ValueError(f"input grid {wrapped.grid} does not match stack grid {stack.grid}")
    if u.shape[-2:] != (stack.grid.n, stack.grid.n):
        raise ValueError(f"input shape {u.shape[-2:]} does not match stack grid n={stack.grid.n}")
    hop = stack.hop
    trace = ForwardTrace() if keep_trace else None
    for layer in stack.layers:
        u = hop.apply(u)
        if trace is not None:
            trace.pre.append(u)
        u = layer_modulate(u, layer)
        if trace is not None:
            trace.post.append(u)
    u = hop.apply(u)
    if trace is not None:
        trace.output = u
        trace.detector = detect(u)
    if wrapped is not None:
        depth = (stack.n_layers + 1) * stack.distance
        u = ComplexField(stack.grid, u, wrapped.z + depth)
    return (u, trace) if keep_trace else u


def detect(e) -> np.ndarray:
    """Square-law detector: ``A_0 = E * conj(E)``."""
    u = e.samples if isinstance(e, ComplexField) else np.asarray(e)
    return u.real**2 + u.imag**2
