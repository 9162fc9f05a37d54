"""Dataset generation, loss, the optimization loop and evaluation metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field
from typing import Callable

import numpy as np

from .field import GridSpec, SpectrumBasis, decompose_weights, reference_phases, synthesize_batch
from .model import Batch, HybridModel, spectrum_loss

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class DatasetConfig:
    n_spectra: int = 200
    phases_per_weight: int = 10
    n_val: int = 500
    n_test: int = 500
    uniform_augment: int = 0

    @property
    def n_train(self) -> int:
        return self.n_spectra * self.phases_per_weight + self.uniform_augment


@dataclass
class Dataset:
    """In-memory split: unit-power input fields and their labels."""

    fields: np.ndarray
    weights: np.ndarray
    phases: np.ndarray
    split: str = "train"

    def __len__(self) -> int:
        return len(self.fields)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.fields[idx], self.weights[idx], self.phases[idx], self.split)


def draw_weights(rng: np.random.Generator, count: int) -> np.ndarray:
    """|N(0, 1)| per component, normalized to sum 1; all-zero draws are redrawn."""
    while True:
        w = np.abs(rng.standard_normal(count))
        if w.sum() > 0:
            return w / w.sum()


def draw_phases(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(-np.pi, np.pi, count)


def make_split(rng, basis: SpectrumBasis, grid: GridSpec, w0: float, n_spectra: int, phases_per_weight: int,
               split: str, uniform: int = 0, dtype=np.complex64) -> Dataset:
    weights, phases = [], []
    for _ in range(n_spectra):
        w = draw_weights(rng, basis.count)
        for _ in range(phases_per_weight):
            weights.append(w)
            phases.append(draw_phases(rng, basis.count))
    for _ in range(uniform):
        weights.append(np.full(basis.count, 1.0 / basis.count))
        phases.append(draw_phases(rng, basis.count))
    weights = np.array(weights).reshape(-1, basis.count)
    phases = np.array([reference_phases(np.sqrt(w), p, basis) for w, p in zip(weights, phases)]).reshape(
        -1, basis.count)
    coeffs = np.sqrt(weights) * np.exp(1j * phases)
    fields = np.empty((len(weights), grid.n, grid.n), dtype=dtype)
    for i in range(0, len(weights), 500):
        fields[i:i + 500] = synthesize_batch(coeffs[i:i + 500], basis, grid, w0, dtype=dtype)
    return Dataset(fields, weights, phases, split)


def generate_dataset(config: DatasetConfig, basis: SpectrumBasis, grid: GridSpec, w0: float | None = None,
                     seed: int = 0, dtype=np.complex64, verify: int = 0) -> dict[str, Dataset]:
    """Build train/val/test splits of random multiplexed vortex beams.

    Each weight vector is paired with ``phases_per_weight`` independent
    intermodal phase vectors; validation and test draw their own weight
    vectors, so splits never share a spectrum. ``verify`` samples per split
    are re-labelled with the azimuthal decomposition and checked to 1e-6.
    """
    w0 = grid.default_waist() if w0 is None else w0
    streams = np.random.SeedSequence(seed).spawn(3)
    val_spectra = math.ceil(config.n_val / config.phases_per_weight)
    test_spectra = math.ceil(config.n_test / config.phases_per_weight)
    out = {
        "train": make_split(np.random.default_rng(streams[0]), basis, grid, w0, config.n_spectra,
                            config.phases_per_weight, "train", config.uniform_augment, dtype),
        "val": make_split(np.random.default_rng(streams[1]), basis, grid, w0, val_spectra,
                          config.phases_per_weight, "val", 0, dtype).subset(slice(0, config.n_val)),
        "test": make_split(np.random.default_rng(streams[2]), basis, grid, w0, test_spectra,
                           config.phases_per_weight, "test", 0, dtype).subset(slice(0, config.n_test)),
    }
    for name, ds in out.items():
        ds.split = name
        if verify:
            k = min(verify, len(ds))
            err = np.abs(decompose_weights(ds.fields[:k].astype(complex), grid, basis) - ds.weights[:k]).max()
            if err > 1e-6:
                raise ValueError(f"{name} labels disagree with the decomposition by {err:.3g}")
    return out


def compute_loss(pred, label, params=None, l2: float = 0.0, head: str = "power",
                 pred_phases=None, label_phases=None) -> float:
    """MSE over spectrum entries plus ``l2 * sum ||param||^2``.

    In complex mode the phase term ``mean_b sum_l s_l (1 - cos(dphi_l))`` is
    added, weighted by the true spectrum.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {label.shape}")
    loss = float(np.mean((pred - label) ** 2))
    if head == "complex":
        if pred_phases is None or label_phases is None:
            raise ValueError("complex head needs predicted and true phases")
        lab = np.atleast_2d(label)
        err = np.atleast_2d(pred_phases) - np.atleast_2d(label_phases)
        loss += float(np.sum(lab * (1 - np.cos(err)))) / len(lab)
    if params is not None and l2:
        arrays = params.values() if isinstance(params, dict) else params
        loss += l2 * float(sum(np.sum(np.asarray(a, dtype=float) ** 2) for a in arrays))
    return loss


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=float) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=float) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: dict[str, float] | None = None):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr * (lr_scale.get(k.split(".")[0], 1.0) if lr_scale else 1.0)
            p -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 300
    lr: float = 5e-3
    optical_lr_scale: float = 1.0
    lr_decay: float = 0.5
    lr_period: int = 15
    l2: float = 1e-4
    temperature: float = 10 ** -1.2
    alpha: float = 1.0
    beta: float = 3.0
    seed: int = 0
    head: str = "power"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "lr_decay", "lr_period", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.head not in ("power", "complex"):
            raise ValueError(f"unknown head {self.head!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate of a 0-based epoch: stepped decay every ``lr_period`` epochs."""
        return self.lr * self.lr_decay ** (epoch // self.lr_period)


@dataclass
class TrainReport:
    train_loss: list[float] = dc_field(default_factory=list)
    val_loss: list[float] = dc_field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0
    metrics: dict = dc_field(default_factory=dict)

    def write_curves(self, path) -> None:
        """``epoch,train_loss,val_loss``; epoch 0 is the untrained model."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([e, repr(float(tl)), repr(float(vl))])


def dataset_loss(model: HybridModel, ds: Dataset, chunk: int = 250) -> float:
    """Data loss (no regularization) averaged over a split."""
    s, ph = model.predict(ds.fields, chunk)
    return compute_loss(s, ds.weights, head=model.head, pred_phases=ph, label_phases=ds.phases)


def _batch(ds: Dataset, idx, model: HybridModel, l2: float) -> Batch:
    return Batch(ds.fields[idx], ds.weights[idx], ds.phases[idx] if model.head == "complex" else None, l2)


def train(model: HybridModel, config: TrainConfig, train_set: Dataset, val_set: Dataset,
          on_epoch: Callable[[int, HybridModel], None] | None = None):
    """Mini-batch Adam on optical and electronic parameters together.

    Keeps the parameters with the lowest validation loss. Returns the best
    model (a copy) and the :class:`TrainReport`; ``model`` itself ends at the
    final epoch. ``on_epoch(epoch, model)`` is called after every epoch
    (1-based), including the untrained state as epoch 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    report = TrainReport()
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    scales = {"theta": config.optical_lr_scale}
    t0 = time.perf_counter()
    report.train_loss.append(dataset_loss(model, train_set))
    report.val_loss.append(dataset_loss(model, val_set))
    best = (report.val_loss[0], 0, model.copy())
    if on_epoch:
        on_epoch(0, model)
    n = len(train_set)
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = model.loss_and_grads(_batch(train_set, idx, model, config.l2))
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                snap = {"epoch": epoch + 1, "batch_start": start, "loss": loss,
                        "params": {k: v.copy() for k, v in params.items()}}
                raise NonFiniteLoss(f"non-finite loss {loss} at epoch {epoch + 1}", snap)
            opt.step(grads, scales)
            total += loss * len(idx)
            seen += len(idx)
        report.train_loss.append(total / seen)
        report.val_loss.append(dataset_loss(model, val_set))
        if report.val_loss[-1] < best[0]:
            best = (report.val_loss[-1], epoch + 1, model.copy())
        log.info("epoch %d  train %.4g  val %.4g  lr %.3g", epoch + 1, report.train_loss[-1],
                 report.val_loss[-1], opt.lr)
        if on_epoch:
            on_epoch(epoch + 1, model)
    report.best_epoch = best[1]
    report.wall_clock = time.perf_counter() - t0
    return best[2], report


def r_squared(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-spectrum coefficient of determination; NaN for constant labels."""
    pred = np.atleast_2d(pred)
    label = np.atleast_2d(label)
    ss_res = np.sum((label - pred) ** 2, axis=1)
    ss_tot = np.sum((label - label.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1 - ss_res / np.where(ss_tot > 0, ss_tot, 1), np.nan)


def evaluate(model: HybridModel, ds: Dataset) -> dict:
    """Per-sample and mean MSE and R^2 (R^2 is NaN where a label is constant)."""
    if ds.weights.shape[1] != model.basis.count:
        raise ValueError("dataset basis does not match the model")
    s, ph = model.predict(ds.fields)
    mse = np.mean((s - ds.weights) ** 2, axis=1)
    r2 = r_squared(s, ds.weights)
    out = {"mse": mse, "r2": r2, "mean_mse": float(mse.mean()),
           "mean_r2": float(np.nanmean(r2)) if np.any(np.isfinite(r2)) else float("nan"),
           "r2_undefined": int(np.sum(~np.isfinite(r2)))}
    if ph is not None:
        err = np.angle(np.exp(1j * (ph - ds.phases)))
        out["mean_phase_error"] = float(np.sum(ds.weights * np.abs(err)) / len(ds))
    return out


@dataclass
class SweepRow:
    temperature: float
    converged: bool
    mean_mse: float
    best_val: float


def temperature_grid(points: int = 11, low: float = 0.01, high: float = 1.0) -> np.ndarray:
    return np.logspace(np.log10(low), np.log10(high), points)


def temperature_sweep(make_model: Callable[[float], HybridModel], config: TrainConfig, train_set: Dataset,
                      val_set: Dataset, eval_set: Dataset, temperatures=None,
                      converge_ratio: float = 0.5) -> list[SweepRow]:
    """Train one model per temperature and report its evaluation MSE.

    A run counts as converged when its best validation loss is below
    ``converge_ratio`` times the loss of the untrained model, and training
    never produced a non-finite loss.
    """
    temperatures = temperature_grid() if temperatures is None else temperatures
    rows = []
    for t in temperatures:
        cfg = TrainConfig(**{**asdict(config), "temperature": float(t)})
        model = make_model(float(t))
        try:
            best, report = train(model, cfg, train_set, val_set)
        except NonFiniteLoss:
            rows.append(SweepRow(float(t), False, float("nan"), float("nan")))
            continue
        best_val = min(report.val_loss)
        ok = best_val < converge_ratio * report.val_loss[0]
        rows.append(SweepRow(float(t), bool(ok), evaluate(best, eval_set)["mean_mse"], best_val))
    return rows


def write_sweep(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["temperature", "converged", "mean_mse", "best_val_loss"])
        for r in rows:
            w.writerow([repr(r.temperature), int(r.converged), repr(r.mean_mse), repr(r.best_val)])
