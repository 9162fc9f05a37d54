"""Command-line entry point: ``oamspec <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O or file
format failure, 3 non-finite numbers during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .distortion import DEFAULT_MAGNITUDES, KINDS, TurbulenceConfig, robustness_sweep
from .field import GridSpec, phase_shift_reconstruct, preprocess_frames
from .interpret import (graph_evolution, occlusion_scan, presence_accuracy, random_probes, reduced_readout,
                        single_mode_accuracy)
from .io import (FormatError, dumps, load_checkpoint, read_fields, read_frame, save_checkpoint, write_field,
                 write_fields, write_manifest, write_pgm_raw, atomic_write)
from .training import (Dataset, DatasetConfig, NonFiniteLoss, TrainConfig, evaluate, generate_dataset,
                       temperature_grid, temperature_sweep, train, write_sweep)

log = logging.getLogger("oamspec")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")


# -- helpers ----------------------------------------------------------------------

def _config(args) -> dict:
    overrides = {}
    if getattr(args, "set", None):
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise cfgmod.ConfigError(f"--set expects section.key=value, got {item!r}")
            section, _, name = key.partition(".")
            try:
                overrides.setdefault(section, {})[name] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise cfgmod.ConfigError(f"--set {key}: {exc}") from exc
    cfg = cfgmod.load_config(args.config, args.preset)
    if overrides:
        cfg = cfgmod.merge(cfg, overrides)
        cfgmod.validate(cfg)
    return cfg


class _Staging:
    """Write into a temporary sibling directory and move it into place on success."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out.mkdir(exist_ok=True)
            for item in self.tmp.iterdir():
                dest = self.out / item.name
                if dest.is_dir():
                    shutil.rmtree(dest)
                item.replace(dest)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _outputs(d: Path) -> list[str]:
    return sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def load_dataset(directory, dtype=np.complex64) -> tuple[dict[str, Dataset], dict]:
    d = Path(directory)
    labels = json.loads((d / "labels.json").read_text())
    out = {}
    for split in SPLITS:
        fields = read_fields(d / f"{split}.oamf")
        w = np.asarray(labels[split]["weights"], dtype=float)
        ph = np.asarray(labels[split]["phases"], dtype=float)
        if len(fields) != len(w):
            raise FormatError(f"{split}: {len(fields)} fields but {len(w)} labels")
        out[split] = Dataset(np.stack([f.samples for f in fields]).astype(dtype), w, ph, split)
    return out, labels.get("grid", {})


def _dataset_for(cfg: dict, args) -> dict[str, Dataset]:
    if args.dataset:
        data, grid = load_dataset(args.dataset)
        g = cfgmod.grid_of(cfg)
        if grid and (grid["n"] != g.n or grid["pitch"] != g.pitch):
            raise ValueError("dataset grid does not match the configuration")
        return data
    ds = cfg["dataset"]
    dc = DatasetConfig(ds["n_spectra"], ds["phases_per_weight"], ds["n_val"], ds["n_test"], ds["uniform_augment"])
    return generate_dataset(dc, cfgmod.basis_of(cfg), cfgmod.grid_of(cfg), cfgmod.waist_of(cfg), ds["seed"])


def _train_config(cfg: dict) -> TrainConfig:
    t, st, ro = cfg["training"], cfg["stack"], cfg["readout"]
    return TrainConfig(t["epochs"], t["batch_size"], t["lr"], t["optical_lr_scale"], t["lr_decay"], t["lr_period"],
                       t["l2"], ro["temperature"], st["alpha"], st["beta"], t["seed"], ro["head"])


# -- commands ---------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    ds = cfg["dataset"]
    grid = cfgmod.grid_of(cfg)
    data = generate_dataset(DatasetConfig(ds["n_spectra"], ds["phases_per_weight"], ds["n_val"], ds["n_test"],
                                          ds["uniform_augment"]),
                            cfgmod.basis_of(cfg), grid, cfgmod.waist_of(cfg), ds["seed"], verify=args.verify)
    with _Staging(args.out) as tmp:
        labels = {"grid": {"n": grid.n, "pitch": grid.pitch}, "basis": cfg["grid"]["basis"]}
        for split, d in data.items():
            write_fields(tmp / f"{split}.oamf", d.fields, grid.pitch)
            labels[split] = {"weights": d.weights, "phases": d.phases}
        atomic_write(tmp / "labels.json", dumps(labels).encode())
        write_manifest(tmp, "dataset", cfg, ds["seed"], _outputs(tmp),
                       {"counts": {k: len(v) for k, v in data.items()}})
    print(f"wrote {sum(len(v) for v in data.values())} fields to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg["training"]["epochs"] = args.epochs
    data = _dataset_for(cfg, args)
    tc = _train_config(cfg)
    with _Staging(args.out) as tmp:
        if args.temperature_sweep:
            def make(t):
                c = cfgmod.merge(cfg, {"readout": {"temperature": t}})
                return cfgmod.model_from_config(c)

            mixed = data["test"]
            rows = temperature_sweep(make, tc, data["train"], data["val"], mixed,
                                     temperature_grid(args.sweep_points))
            write_sweep(rows, tmp / "temperature_sweep.csv")
        else:
            model = cfgmod.model_from_config(cfg)
            every = cfg["training"]["snapshot_every"]

            def snapshot(epoch, m):
                if every and epoch % every == 0:
                    save_checkpoint(m, tmp / "snapshots" / f"epoch_{epoch:04d}", {"epoch": epoch})

            best, report = train(model, tc, data["train"], data["val"], snapshot)
            report.write_curves(tmp / "curves.csv")
            metrics = evaluate(best, data["test"])
            summary = {"best_epoch": report.best_epoch, "test_mean_mse": metrics["mean_mse"],
                       "test_mean_r2": metrics["mean_r2"], "r2_undefined": metrics["r2_undefined"]}
            save_checkpoint(best, tmp, {"seed": tc.seed, "best_epoch": report.best_epoch})
            atomic_write(tmp / "metrics.json", dumps(summary).encode())
        write_manifest(tmp, "train", cfg, tc.seed, _outputs(tmp))
    print(f"training finished; outputs in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data, _ = load_dataset(args.dataset)
    ds = data[args.split]
    m = evaluate(model, ds)
    with _Staging(args.out) as tmp:
        _write_rows(tmp / "per_sample.csv", ["index", "mse", "r2"],
                    ((i, float(a), float(b)) for i, (a, b) in enumerate(zip(m["mse"], m["r2"]))))
        summary = {k: v for k, v in m.items() if k not in ("mse", "r2")}
        summary["split"] = args.split
        atomic_write(tmp / "metrics.json", dumps(summary).encode())
        write_manifest(tmp, "eval", {"checkpoint": str(args.checkpoint), "split": args.split}, None, _outputs(tmp))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    fields = [f for path in args.fields for f in read_fields(path)]
    for f in fields:
        if f.grid != model.grid:
            raise ValueError(f"field grid n={f.grid.n}, pitch={f.grid.pitch} does not match the model")
    stack = np.stack([f.samples for f in fields]).astype(np.complex64)
    s, ph = model.predict(stack)
    ells = [int(e) for e in model.basis.ells]
    out = Path(args.out)
    if out.suffix == ".json":
        payload = {"ells": ells, "spectra": s}
        if ph is not None:
            payload["phases"] = ph
        atomic_write(out, dumps(payload).encode())
    else:
        header = ["index"] + [f"s[{e}]" for e in ells] + ([f"phi[{e}]" for e in ells] if ph is not None else [])
        rows = [[i, *row, *(ph[i] if ph is not None else [])] for i, row in enumerate(s)]
        tmp = out.with_name(f".{out.name}.part")
        _write_rows(tmp, header, rows)
        tmp.replace(out)
    print(f"wrote {len(s)} spectra to {out}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    dist = cfg["distortion"]
    kinds = KINDS if args.kind == "all" else (args.kind,)
    with _Staging(args.out) as tmp:
        for kind in kinds:
            mags = args.magnitudes if args.magnitudes else (dist["magnitudes"] or {}).get(kind)
            turb = TurbulenceConfig(outer_scale=dist["outer_scale"], inner_scale=dist["inner_scale"],
                                    n_screens=dist["n_screens"], path=dist["path"])
            rep = robustness_sweep(model, kind, mags if mags is not None else DEFAULT_MAGNITUDES[kind],
                                   w0=cfgmod.waist_of(cfg), turbulence=turb, seed=dist["seed"])
            rep.write_csv(tmp / f"robustness_{kind}.csv")
        write_manifest(tmp, "robustness", cfg, dist["seed"], _outputs(tmp), {"checkpoint": str(args.checkpoint)})
    print(f"robustness reports in {args.out}")
    return EXIT_OK


def cmd_interpret(args) -> int:
    cfg = _config(args)
    it = cfg["interpretation"]
    window = args.window or it["window"]
    stride = args.stride or it["stride"]
    reference = args.reference or it["reference"]
    model, _ = load_checkpoint(args.checkpoint)
    probes = random_probes(model, args.probes or it["probes"], it["seed"], cfgmod.waist_of(cfg))
    with _Staging(args.out) as tmp:
        graph = occlusion_scan(model, probes, window, stride, reference)
        graph.write_csv(tmp / "graph.csv")
        write_pgm_raw(tmp / "graph.pgm", graph.image())
        acc, fractions = presence_accuracy(model, graph, cfgmod.waist_of(cfg))
        rows = []
        full, _ = reduced_readout(model, graph, probes)
        for b in sorted({0.04, 0.1, it["budget"], 0.5, 1.0}):
            s, frac = reduced_readout(model, graph, probes, budget=b)
            rows.append((b, frac, float(np.mean((s - full) ** 2)), 1.0 / frac if frac else float("inf")))
        _write_rows(tmp / "reduced_readout.csv", ["budget", "fraction_read", "mse_vs_full", "reduction_factor"],
                    rows)
        _write_rows(tmp / "presence.csv", ["ell", "fraction_read"],
                    zip((int(e) for e in model.basis.ells), (float(f) for f in fractions)))
        budget_acc, budget_frac = single_mode_accuracy(model, graph, it["budget"], cfgmod.waist_of(cfg))
        summary = {"labels_present": sorted({int(v) for v in graph.labels.ravel()}), "presence_accuracy": acc,
                   "budget": it["budget"], "budget_fraction_read": budget_frac, "budget_accuracy": budget_acc}
        if args.evolution:
            dirs = sorted(p for p in Path(args.evolution).iterdir() if (p / "model.json").exists())
            loaded = [load_checkpoint(p) for p in dirs]
            graphs, changes = graph_evolution([m for m, _ in loaded], probes, window, stride, reference,
                                              [meta.get("epoch", i) for i, (_, meta) in enumerate(loaded)])
            _write_rows(tmp / "evolution.csv", ["epoch_from", "epoch_to", "change_fraction"],
                        ((a.epoch, b.epoch, float(c)) for a, b, c in zip(graphs, graphs[1:], changes)))
        atomic_write(tmp / "summary.json", dumps(summary).encode())
        write_manifest(tmp, "interpret", cfg, it["seed"], _outputs(tmp), {"checkpoint": str(args.checkpoint)})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    frames = [read_frame(p) for p in args.frames]
    if not args.no_preprocess:
        frames = [preprocess_frames(f, args.crop, args.size, args.blur) for f in frames]
    grid = GridSpec(frames[0].shape[0], args.pitch)
    field = phase_shift_reconstruct(*frames, args.reference, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_field(out, field)
    print(f"wrote {grid.n}x{grid.n} field to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are validation errors, not I/O failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oamspec", description="Hybrid optical-electronic OAM spectrum analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file overriding preset values")
        sp.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=JSON", help="override one entry")
        return sp

    sp = with_config(sub.add_parser("dataset", help="generate simulated train/val/test splits"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--verify", type=int, default=20, help="labels re-checked by decomposition per split")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dataset)

    sp = with_config(sub.add_parser("train", help="train a model (or a temperature sweep)"))
    sp.add_argument("--dataset", help="directory written by 'dataset'; generated in memory if omitted")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--temperature-sweep", action="store_true")
    sp.add_argument("--sweep-points", type=int, default=11)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict spectra for field files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("fields", nargs="+")
    sp.add_argument("--out", required=True, help=".json or .csv")
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("robustness", help="distortion sweeps"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", default="all", choices=(*KINDS, "all"))
    sp.add_argument("--magnitudes", type=float, nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_robustness)

    sp = with_config(sub.add_parser("interpret", help="occlusion graph and reduced-region readout"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--probes", type=int)
    sp.add_argument("--reference", choices=("none", "blank"), help="occlusion baseline (default from config)")
    sp.add_argument("--evolution", help="directory of per-epoch checkpoints")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_interpret)

    sp = sub.add_parser("reconstruct", help="complex field from four phase-stepped frames")
    sp.add_argument("--frames", nargs=4, required=True, metavar=("I1", "I2", "I3", "I4"))
    sp.add_argument("--reference", type=float, required=True, help="reference amplitude")
    sp.add_argument("--crop", type=int, default=600)
    sp.add_argument("--size", type=int, default=200)
    sp.add_argument("--blur", type=float, default=1.0)
    sp.add_argument("--pitch", type=float, default=0.5)
    sp.add_argument("--no-preprocess", action="store_true", help="use frames as they are")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reconstruct)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
