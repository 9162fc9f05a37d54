"""Run configuration: JSON sections with defaults, presets and strict key checking."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .field import GridSpec, SpectrumBasis

DEFAULTS: dict[str, dict] = {
    "grid": {"n": 64, "pitch": 0.5, "waist": None, "basis": [-5, 5]},
    "stack": {"n_layers": 5, "distance": 10.0, "alpha": 1.0, "beta": 3.0, "pad_factor": 2},
    "readout": {"hidden": [256], "temperature": 10 ** -1.2, "head": "power", "detector_gain": None,
                "output_init_scale": 0.1},
    "training": {"epochs": 60, "batch_size": 100, "lr": 2e-3, "optical_lr_scale": 1.0, "lr_decay": 0.5,
                 "lr_period": 15, "l2": 1e-4, "seed": 0, "snapshot_every": 0},
    "dataset": {"n_spectra": 200, "phases_per_weight": 10, "n_val": 500, "n_test": 500, "uniform_augment": 0,
                "seed": 0},
    "distortion": {"magnitudes": None, "outer_scale": 10.0, "inner_scale": 0.01, "n_screens": 5, "path": 10.0,
                   "n_random_probes": 20, "seed": 0},
    "interpretation": {"window": 2, "stride": None, "probes": 200, "budget": 0.2, "reference": "blank",
                       "seed": 0},
}

PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": {
        "grid": {"n": 200, "pitch": 0.5, "basis": [-10, 10]},
        "stack": {"distance": 40.0},
        "dataset": {"n_spectra": 500, "phases_per_weight": 50, "n_val": 5000, "n_test": 5000},
        "training": {"batch_size": 300},
        "distortion": {"path": 67.0},
    },
}


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive update that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a section")
            out[key] = merge(base[key], value, path)
        else:
            out[key] = value
    return out


def build_config(preset: str = "desk", overrides: dict | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = merge(DEFAULTS, PRESETS[preset])
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def load_config(path=None, preset: str = "desk") -> dict:
    overrides = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError("configuration must be a JSON object")
        preset = overrides.pop("preset", preset)
    return build_config(preset, overrides)


def validate(cfg: dict) -> None:
    try:
        grid_of(cfg)
        basis_of(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    checks = [
        ("stack.n_layers", cfg["stack"]["n_layers"] >= 1),
        ("stack.distance", cfg["stack"]["distance"] >= 0),
        ("stack.pad_factor", cfg["stack"]["pad_factor"] >= 2),
        ("readout.temperature", cfg["readout"]["temperature"] > 0),
        ("readout.head", cfg["readout"]["head"] in ("power", "complex")),
        ("readout.detector_gain", cfg["readout"]["detector_gain"] is None or cfg["readout"]["detector_gain"] > 0),
        ("readout.hidden", all(int(h) >= 1 for h in cfg["readout"]["hidden"])),
        ("training.epochs", cfg["training"]["epochs"] >= 1),
        ("training.batch_size", cfg["training"]["batch_size"] >= 1),
        ("training.lr", cfg["training"]["lr"] > 0),
        ("training.lr_period", cfg["training"]["lr_period"] >= 1),
        ("training.l2", cfg["training"]["l2"] >= 0),
        ("dataset.n_spectra", cfg["dataset"]["n_spectra"] >= 1),
        ("dataset.phases_per_weight", cfg["dataset"]["phases_per_weight"] >= 1),
        ("dataset.n_val", cfg["dataset"]["n_val"] >= 1),
        ("dataset.n_test", cfg["dataset"]["n_test"] >= 1),
        ("interpretation.window", cfg["interpretation"]["window"] >= 1),
        ("interpretation.probes", cfg["interpretation"]["probes"] >= 1),
        ("interpretation.budget", 0 < cfg["interpretation"]["budget"] <= 1),
        ("interpretation.reference", cfg["interpretation"]["reference"] in ("none", "blank")),
    ]
    bad = [name for name, ok in checks if not ok]
    if bad:
        raise ConfigError(f"invalid values for {', '.join(bad)}")


def grid_of(cfg: dict) -> GridSpec:
    return GridSpec(int(cfg["grid"]["n"]), float(cfg["grid"]["pitch"]))


def basis_of(cfg: dict) -> SpectrumBasis:
    k_n, k_p = cfg["grid"]["basis"]
    return SpectrumBasis(int(k_n), int(k_p))


def waist_of(cfg: dict) -> float:
    w = cfg["grid"]["waist"]
    return grid_of(cfg).default_waist() if w is None else float(w)


def model_from_config(cfg: dict, dtype=np.float32):
    from .model import HybridModel

    st, ro = cfg["stack"], cfg["readout"]
    rng = np.random.default_rng(np.random.SeedSequence(cfg["training"]["seed"]).spawn(2)[0])
    return HybridModel.create(grid_of(cfg), basis_of(cfg), st["n_layers"], st["distance"], st["alpha"], st["beta"],
                              tuple(int(h) for h in ro["hidden"]), ro["temperature"], ro["head"], st["pad_factor"],
                              rng=rng, dtype=dtype, detector_gain=ro["detector_gain"],
                              output_init_scale=ro["output_init_scale"])
