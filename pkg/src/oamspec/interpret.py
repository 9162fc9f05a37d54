"""Occlusion scanning of the detector plane and readout from reduced regions."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .field import synthesize_batch
from .readout import relu, split_heads


@dataclass
class CharacteristicGraph:
    """Map from detector windows to the topological charge they favour.

    ``labels[i, j]`` is the charge assigned to the cell whose top-left pixel
    is ``(i * stride, j * stride)``; ``votes[i, j]`` counts how many probes
    picked each basis component there. ``power`` is the mean readout input
    summed over each cell, averaged over the probes.
    """

    window: int
    stride: int
    labels: np.ndarray
    votes: np.ndarray
    ells: np.ndarray
    epoch: int | None = None
    power: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def cell_mask(self, n: int, keep: np.ndarray) -> np.ndarray:
        """Detector-pixel mask covering the cells where ``keep`` is true."""
        mask = np.zeros((n, n), dtype=bool)
        for i, j in zip(*np.nonzero(keep)):
            r, c = i * self.stride, j * self.stride
            mask[r:r + self.window, c:c + self.window] = True
        return mask

    def label_mask(self, n: int, ells) -> np.ndarray:
        return self.cell_mask(n, np.isin(self.labels, list(ells)))

    def confidence(self) -> np.ndarray:
        """Vote share of the winning label per cell."""
        return self.votes.max(axis=-1) / np.maximum(self.votes.sum(axis=-1), 1)

    def relevance(self) -> np.ndarray:
        """Confidence weighted by captured power; dark cells vote unanimously but say nothing."""
        conf = self.confidence()
        return conf if self.power is None else conf * self.power

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_row", "cell_col", "label", "votes"])
            for i in range(self.shape[0]):
                for j in range(self.shape[1]):
                    w.writerow([i, j, int(self.labels[i, j]), ";".join(str(int(v)) for v in self.votes[i, j])])

    def image(self) -> np.ndarray:
        """Gray levels 1..count per label at detector resolution (stride-sized blocks)."""
        idx = np.searchsorted(self.ells, self.labels) + 1
        step = 65535 // len(self.ells)
        return np.kron(idx * step, np.ones((self.stride, self.stride), dtype=np.int64))


def readout_inputs(model, fields) -> np.ndarray:
    """Detector images as seen by the readout (gain applied), flattened."""
    det = model.detector_images(fields)
    return model.detector_gain * det.reshape(len(det), -1)


def _readout_from_hidden(net, z1: np.ndarray) -> np.ndarray:
    a = relu(z1)
    for w, b in zip(net.weights[1:-1], net.biases[1:-1]):
        a = relu(a @ w.T + b)
    return a @ net.weights[-1].T + net.biases[-1]


def occluded_spectra(model, inputs: np.ndarray, pixel_index: np.ndarray) -> np.ndarray:
    """Readout output when only the given flat pixel indices are kept."""
    net = model.readout
    if len(net.weights) == 1:
        z = inputs[:, pixel_index] @ net.weights[0][:, pixel_index].T + net.biases[0]
    else:
        z1 = inputs[:, pixel_index] @ net.weights[0][:, pixel_index].T + net.biases[0]
        z = _readout_from_hidden(net, z1)
    return split_heads(net, z)[0]


def occlusion_scan(model, probes: np.ndarray, window: int = 2, stride: int | None = None,
                   reference: str = "none", epoch: int | None = None) -> CharacteristicGraph:
    """Slide a window over the detector, keep only its pixels and vote on the output.

    Each probe votes for the argmax component of the occluded output; a cell
    takes the most frequent vote (ties go to the lower charge). With
    ``reference="blank"`` the argmax is taken of the change relative to the
    fully occluded detector, which discounts components favoured by the
    biases alone.
    """
    n = model.grid.n
    stride = window if stride is None else stride
    if not 1 <= window <= n:
        raise ValueError(f"window {window} does not fit a {n}x{n} detector")
    if stride < 1:
        raise ValueError("stride must be positive")
    if reference not in ("none", "blank"):
        raise ValueError(f"unknown reference {reference!r}")
    inputs = readout_inputs(model, probes)
    base = None
    if reference == "blank":
        base = occluded_spectra(model, inputs[:1], np.array([], dtype=int))
    rows = (n - window) // stride + 1
    k = model.basis.count
    votes = np.zeros((rows, rows, k), dtype=np.int64)
    power = np.zeros((rows, rows))
    mean_input = inputs.mean(axis=0)
    grid_idx = np.arange(n * n).reshape(n, n)
    for i in range(rows):
        for j in range(rows):
            r, c = i * stride, j * stride
            pix = grid_idx[r:r + window, c:c + window].ravel()
            s = occluded_spectra(model, inputs, pix)
            pick = np.argmax(s if base is None else s - base, axis=1)
            votes[i, j] = np.bincount(pick, minlength=k)
            power[i, j] = mean_input[pix].sum()
    ells = np.asarray(model.basis.ells)
    labels = ells[np.argmax(votes, axis=-1)]
    return CharacteristicGraph(window, stride, labels, votes, ells, epoch, power)


def graph_change(a: CharacteristicGraph, b: CharacteristicGraph) -> float:
    if a.shape != b.shape:
        raise ValueError("graphs have different cell grids")
    return float(np.mean(a.labels != b.labels))


def graph_evolution(models, probes: np.ndarray, window: int = 2, stride: int | None = None,
                    reference: str = "none", epochs=None):
    """Graphs of successive checkpoints and the fraction of cells changed between neighbours."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least two checkpoints")
    epochs = list(range(len(models))) if epochs is None else list(epochs)
    graphs = [occlusion_scan(m, probes, window, stride, reference, e) for m, e in zip(models, epochs)]
    changes = [graph_change(a, b) for a, b in zip(graphs, graphs[1:])]
    return graphs, np.array(changes)


def budget_mask(graph: CharacteristicGraph, n: int, budget: float) -> np.ndarray:
    """Most relevant cells, taken in turn from each label, up to ``budget`` of the pixels."""
    if not 0 < budget <= 1:
        raise ValueError("budget must be in (0, 1]")
    if budget == 1:
        return np.ones((n, n), dtype=bool)
    conf = graph.relevance()
    queues = []
    for ell in graph.ells:
        cells = np.argwhere(graph.labels == ell)
        order = np.argsort(-conf[tuple(cells.T)], kind="stable") if len(cells) else []
        queues.append([tuple(cells[o]) for o in order])
    keep = np.zeros(graph.shape, dtype=bool)
    mask = np.zeros((n, n), dtype=bool)
    while any(queues):
        for q in queues:
            if not q:
                continue
            cell = q.pop(0)
            trial = keep.copy()
            trial[cell] = True
            trial_mask = graph.cell_mask(n, trial)
            if trial_mask.mean() > budget:
                return mask
            keep, mask = trial, trial_mask
    return mask


def reduced_readout(model, graph: CharacteristicGraph, fields, select=None, budget: float | None = None):
    """Readout using only part of the detector.

    ``select`` keeps the cells labelled with the given charges; ``budget``
    keeps the most relevant cells up to that pixel fraction. With neither,
    the whole detector is read. Returns ``(spectra, fraction_read)``.
    """
    n = model.grid.n
    if select is not None and budget is not None:
        raise ValueError("give either select or budget, not both")
    if select is not None:
        mask = graph.label_mask(n, select)
    elif budget is not None:
        mask = budget_mask(graph, n, budget)
    else:
        mask = np.ones((n, n), dtype=bool)
    inputs = readout_inputs(model, fields)
    if mask.all():
        return split_heads(model.readout, _full(model, inputs))[0], 1.0
    return occluded_spectra(model, inputs, np.flatnonzero(mask)), float(mask.mean())


def _full(model, inputs):
    net = model.readout
    a = inputs
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = relu(a @ w.T + b)
    return a @ net.weights[-1].T + net.biases[-1]


def presence_accuracy(model, graph: CharacteristicGraph, w0: float | None = None):
    """For each single mode, read only its own cells and check the argmax.

    Returns ``(accuracy, fractions)`` with the pixel fraction read per mode.
    """
    basis, grid = model.basis, model.grid
    fields = synthesize_batch(np.eye(basis.count, dtype=complex), basis, grid, w0)
    hits, fractions = [], []
    for i, ell in enumerate(basis.ells):
        s, frac = reduced_readout(model, graph, fields[i:i + 1].astype(_dtype(model)), select=[ell])
        hits.append(int(np.argmax(s[0])) == i)
        fractions.append(frac)
    return float(np.mean(hits)), np.array(fractions)


def single_mode_accuracy(model, graph: CharacteristicGraph, budget: float, w0: float | None = None):
    """Argmax accuracy on the pure basis modes when only ``budget`` of the detector is read."""
    basis = model.basis
    fields = synthesize_batch(np.eye(basis.count, dtype=complex), basis, model.grid, w0).astype(_dtype(model))
    s, frac = reduced_readout(model, graph, fields, budget=budget)
    return float(np.mean(np.argmax(s, axis=1) == np.arange(basis.count))), frac


def random_probes(model, count: int = 200, seed=0, w0: float | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    k = model.basis.count
    w = np.abs(rng.standard_normal((count, k)))
    w /= w.sum(axis=1, keepdims=True)
    coeffs = np.sqrt(w) * np.exp(1j * rng.uniform(-np.pi, np.pi, w.shape))
    return synthesize_batch(coeffs, model.basis, model.grid, w0).astype(_dtype(model))


def _dtype(model):
    return np.complex64 if model.readout.weights[0].dtype == np.float32 else np.complex128
