import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from oamspec.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from oamspec.field import ComplexField, ComplexSpectrum, GridSpec, SpectrumBasis, phase_shift_frames, synthesize
from oamspec.io import read_field, read_fields, write_field, write_fields, write_pgm_raw

TINY = {
    "grid": {"n": 32, "basis": [-2, 2]},
    "stack": {"n_layers": 2, "distance": 2.0},
    "readout": {"hidden": [16]},
    "training": {"epochs": 2, "batch_size": 4, "snapshot_every": 1},
    "dataset": {"n_spectra": 4, "phases_per_weight": 3, "n_val": 4, "n_test": 4},
    "interpretation": {"window": 4, "probes": 12},
}


def files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["dataset", "--config", str(root / "tiny.json"), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(root / "tiny.json"), "--dataset", str(root / "data"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_dataset_outputs_and_rerun(work, tmp_path):
    d = work / "data"
    assert {"train.oamf", "val.oamf", "test.oamf", "labels.json", "manifest.json"} <= set(files(d))
    assert len(read_fields(d / "train.oamf")) == 12
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 12, "val": 4, "test": 4}
    assert len(manifest["config_hash"]) == 64 and manifest["seed"] == 0
    assert main(["dataset", "--config", str(work / "tiny.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert files(tmp_path / "again") == files(d)
    assert main(["dataset", "--config", str(work / "tiny.json"), "--seed", "1", "--out", str(tmp_path / "s1")]) == 0
    assert files(tmp_path / "s1")["train.oamf"] != files(d)["train.oamf"]


def test_train_outputs(work):
    r = work / "run"
    out = files(r)
    assert {"model.json", "model.tensors", "curves.csv", "metrics.json", "manifest.json"} <= set(out)
    assert {"snapshots/epoch_0000/model.json", "snapshots/epoch_0002/model.tensors"} <= set(out)
    rows = list(csv.reader((r / "curves.csv").read_text().splitlines()))
    assert rows[0] == ["epoch", "train_loss", "val_loss"]
    assert [int(x[0]) for x in rows[1:]] == [0, 1, 2]
    manifest = json.loads((r / "manifest.json").read_text())
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((r / name).read_bytes()).hexdigest() == digest


def test_train_rerun_is_byte_identical(work, tmp_path):
    assert main(["train", "--config", str(work / "tiny.json"), "--dataset", str(work / "data"),
                 "--out", str(tmp_path / "run2")]) == EXIT_OK
    assert files(tmp_path / "run2") == files(work / "run")


def test_eval_matches_training_metrics(work, tmp_path):
    assert main(["eval", "--checkpoint", str(work / "run"), "--dataset", str(work / "data"),
                 "--out", str(tmp_path / "ev")]) == EXIT_OK
    ev = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    tr = json.loads((work / "run" / "metrics.json").read_text())
    assert ev["mean_mse"] == tr["test_mean_mse"]
    lines = (tmp_path / "ev" / "per_sample.csv").read_text().splitlines()
    assert lines[0] == "index,mse,r2" and len(lines) == 5


def test_infer_json_and_csv(work, tmp_path):
    g, b = GridSpec(32, 0.5), SpectrumBasis(-2, 2)
    write_field(tmp_path / "m.oamf", synthesize(ComplexSpectrum.single(b, 1), g))
    assert main(["infer", "--checkpoint", str(work / "run"), str(tmp_path / "m.oamf"),
                 "--out", str(tmp_path / "s.json")]) == EXIT_OK
    out = json.loads((tmp_path / "s.json").read_text())
    assert out["ells"] == [-2, -1, 0, 1, 2]
    assert abs(sum(out["spectra"][0]) - 1) < 1e-5
    assert main(["infer", "--checkpoint", str(work / "run"), str(tmp_path / "m.oamf"), str(tmp_path / "m.oamf"),
                 "--out", str(tmp_path / "s.csv")]) == EXIT_OK
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "index,s[-2],s[-1],s[0],s[1],s[2]" and len(rows) == 3


def test_infer_malformed_file_leaves_no_output(work, tmp_path):
    (tmp_path / "bad.oamf").write_bytes(b"OAMF\x01\x00garbage")
    for name in ("s.json", "s.csv"):
        assert main(["infer", "--checkpoint", str(work / "run"), str(tmp_path / "bad.oamf"),
                     "--out", str(tmp_path / name)]) == EXIT_IO
        assert not (tmp_path / name).exists()
    assert list(tmp_path.iterdir()) == [tmp_path / "bad.oamf"]


def test_infer_grid_mismatch(work, tmp_path):
    write_fields(tmp_path / "f.oamf", np.ones((1, 16, 16), complex), 0.5)
    assert main(["infer", "--checkpoint", str(work / "run"), str(tmp_path / "f.oamf"),
                 "--out", str(tmp_path / "s.json")]) == EXIT_INVALID


def test_robustness_command(work, tmp_path):
    args = ["robustness", "--config", str(work / "tiny.json"), "--checkpoint", str(work / "run"), "--kind", "ts",
            "--magnitudes", "-0.2", "0", "0.2"]
    assert main([*args, "--out", str(tmp_path / "rb")]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "rb" / "robustness_ts.csv").read_text().splitlines()))
    assert [float(r["magnitude"]) for r in rows] == [-0.2, 0.0, 0.2]
    assert rows[1]["mse_vs_before"] == rows[1]["mse_vs_after"]
    assert main([*args, "--out", str(tmp_path / "rb2")]) == EXIT_OK
    assert files(tmp_path / "rb") == files(tmp_path / "rb2")


def test_interpret_command(work, tmp_path):
    assert main(["interpret", "--config", str(work / "tiny.json"), "--checkpoint", str(work / "run"),
                 "--evolution", str(work / "run" / "snapshots"), "--out", str(tmp_path / "it")]) == EXIT_OK
    out = files(tmp_path / "it")
    assert {"graph.csv", "graph.pgm", "reduced_readout.csv", "presence.csv", "evolution.csv", "summary.json"} <= set(out)
    assert len(out["graph.csv"].decode().splitlines()) == 1 + 8 * 8
    evo = out["evolution.csv"].decode().splitlines()
    assert evo[0] == "epoch_from,epoch_to,change_fraction" and len(evo) == 3
    summary = json.loads(out["summary.json"])
    assert 0 <= summary["presence_accuracy"] <= 1 and summary["budget"] == 0.2


def test_reconstruct_round_trip(tmp_path):
    g = GridSpec(32, 0.5)
    rng = np.random.default_rng(0)
    w = rng.random(5)
    f = synthesize(ComplexSpectrum.from_weights(SpectrumBasis(-2, 2), w / w.sum(), rng.uniform(-3, 3, 5)), g)
    paths = []
    for i, frame in enumerate(phase_shift_frames(f, 2.0)):
        # a real field whose intensity is the frame
        write_field(tmp_path / f"i{i}.oamf", ComplexField(g, np.sqrt(frame).astype(complex)))
        paths.append(str(tmp_path / f"i{i}.oamf"))
    assert main(["reconstruct", "--frames", *paths, "--reference", "2.0", "--no-preprocess",
                 "--out", str(tmp_path / "e.oamf")]) == EXIT_OK
    back = read_field(tmp_path / "e.oamf")
    # single-precision storage bounds the error here; the exact inversion is checked in the field tests
    assert np.abs(back.samples - f.samples).max() < 1e-4 * np.abs(f.samples).max()


def test_reconstruct_with_preprocessing(tmp_path):
    frames = [np.full((64, 64), 100 + 10 * i) for i in range(4)]
    paths = []
    for i, fr in enumerate(frames):
        write_pgm_raw(tmp_path / f"f{i}.pgm", fr)
        paths.append(str(tmp_path / f"f{i}.pgm"))
    assert main(["reconstruct", "--frames", *paths, "--reference", "1.0", "--crop", "48", "--size", "16",
                 "--out", str(tmp_path / "e.oamf")]) == EXIT_OK
    e = read_field(tmp_path / "e.oamf")
    assert e.grid.n == 16
    assert np.allclose(e.samples, (100 - 120) / 4 + 1j * (130 - 110) / 4)


def test_reconstruct_missing_frame(tmp_path):
    assert main(["reconstruct", "--frames", "a", "b", "c", "d", "--reference", "1",
                 "--out", str(tmp_path / "e.oamf")]) == EXIT_IO
    assert main(["reconstruct", "--frames", "a", "b", "--reference", "1", "--out", "x"]) == EXIT_INVALID


def test_exit_codes(work, tmp_path):
    cfg = str(work / "tiny.json")
    assert main(["train", "--config", cfg, "--set", "training.nope=1", "--out", str(tmp_path / "a")]) == EXIT_INVALID
    assert main(["train", "--config", cfg, "--set", "training.lr=-1", "--out", str(tmp_path / "a")]) == EXIT_INVALID
    assert main(["train", "--config", cfg, "--set", "training.lr=[", "--out", str(tmp_path / "a")]) == EXIT_INVALID
    assert main(["dataset", "--preset", "giant", "--out", str(tmp_path / "a")]) == EXIT_INVALID
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "a")]) == EXIT_IO
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(work / "data"),
                 "--out", str(tmp_path / "a")]) == EXIT_IO
    assert not (tmp_path / "a").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exit_code(work, tmp_path):
    code = main(["train", "--config", str(work / "tiny.json"), "--dataset", str(work / "data"),
                 "--set", "training.lr=1e30", "--set", "training.epochs=3", "--out", str(tmp_path / "nan")])
    assert code == EXIT_NUMERIC
    assert not (tmp_path / "nan").exists()


def test_temperature_sweep_command(work, tmp_path):
    assert main(["train", "--config", str(work / "tiny.json"), "--dataset", str(work / "data"),
                 "--temperature-sweep", "--sweep-points", "3", "--set", "training.epochs=1",
                 "--out", str(tmp_path / "sw")]) == EXIT_OK
    lines = (tmp_path / "sw" / "temperature_sweep.csv").read_text().splitlines()
    assert lines[0].startswith("temperature,converged,mean_mse") and len(lines) == 4
