"""On-disk formats: field files, checkpoints, PGM images, CSV and manifests.

All binary data is little-endian except PGM, whose 16-bit samples are
big-endian by definition of the format.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .field import ComplexField, GridSpec, SpectrumBasis

FIELD_MAGIC = b"OAMF"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sHIdd")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# -- fields -------------------------------------------------------------------

def encode_field(samples: np.ndarray, pitch: float, z: float = 0.0) -> bytes:
    samples = np.asarray(samples)
    n = samples.shape[0]
    if samples.shape != (n, n):
        raise ValueError(f"field must be square, got {samples.shape}")
    data = np.empty((n, n, 2), dtype="<f4")
    data[..., 0] = samples.real
    data[..., 1] = samples.imag
    return _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, n, float(pitch), float(z)) + data.tobytes()


def decode_fields(buf: bytes) -> list[ComplexField]:
    """Parse one or more concatenated field records."""
    out, pos = [], 0
    if not buf:
        raise FormatError("empty field file")
    while pos < len(buf):
        if len(buf) - pos < _HEADER.size:
            raise FormatError("truncated field header")
        magic, version, n, pitch, z = _HEADER.unpack_from(buf, pos)
        if magic != FIELD_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FIELD_VERSION:
            raise FormatError(f"unsupported field version {version}")
        pos += _HEADER.size
        size = n * n * 8
        if len(buf) - pos < size:
            raise FormatError("truncated field data")
        data = np.frombuffer(buf, dtype="<f4", count=2 * n * n, offset=pos).reshape(n, n, 2)
        pos += size
        try:
            grid = GridSpec(n, pitch)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        samples = data[..., 0].astype(np.float64) + 1j * data[..., 1].astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise FormatError("non-finite samples in field file")
        out.append(ComplexField(grid, samples, z))
    return out


def write_field(path, field: ComplexField) -> None:
    atomic_write(path, encode_field(field.samples, field.grid.pitch, field.z))


def write_fields(path, samples: np.ndarray, pitch: float, z: float = 0.0) -> None:
    atomic_write(path, b"".join(encode_field(s, pitch, z) for s in samples))


def read_fields(path) -> list[ComplexField]:
    return decode_fields(Path(path).read_bytes())


def read_field(path) -> ComplexField:
    fields = read_fields(path)
    if len(fields) != 1:
        raise FormatError(f"{path} holds {len(fields)} fields, expected one")
    return fields[0]


# -- PGM ------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Binary 16-bit PGM; ``image`` is scaled so its maximum maps to ``maxval``."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    peak = image.max() if image.size else 0.0
    scaled = np.zeros_like(image) if peak <= 0 else np.clip(image, 0, None) / peak * maxval
    data = np.rint(scaled).astype(">u2")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    atomic_write(path, header + data.tobytes())


def write_pgm_raw(path, values: np.ndarray, maxval: int = 65535) -> None:
    """16-bit PGM of integer values already in ``[0, maxval]``."""
    values = np.asarray(values)
    if values.ndim != 2 or values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ValueError("values must be a 2-D array within [0, maxval]")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode()
    atomic_write(path, header + values.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8 or 16 bit) as float64 counts."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    if len(buf) - pos < count * np.dtype(dtype).itemsize:
        raise FormatError("truncated PGM data")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(height, width).astype(float)


def read_frame(path) -> np.ndarray:
    """Intensity frame from PGM, or from a field file (its intensity)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FIELD_MAGIC:
        return read_field(path).intensity
    return read_pgm(path)


# -- checkpoints ----------------------------------------------------------------

def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    try:
        while pos < len(buf):
            (length,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + length].decode()
            pos += length
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if len(buf) - pos < 4 * count:
                raise FormatError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed tensor file: {exc}") from exc
    return out


def save_checkpoint(model, directory, extra: dict | None = None) -> None:
    """Write ``model.json`` and ``model.tensors`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layer = model.stack.layers[0]
    meta = {
        "format": "oamspec-checkpoint",
        "version": __version__,
        "grid": {"n": model.grid.n, "pitch": model.grid.pitch},
        "basis": {"k_n": model.basis.k_n, "k_p": model.basis.k_p},
        "stack": {"n_layers": model.stack.n_layers, "distance": model.stack.distance,
                  "pad_factor": model.stack.pad_factor, "alpha": layer.alpha, "beta": layer.beta},
        "readout": {"hidden": [w.shape[0] for w in model.readout.weights[:-1]],
                    "temperature": model.readout.temperature, "head": model.readout.head,
                    "detector_gain": model.detector_gain},
        **(extra or {}),
    }
    atomic_write(d / "model.tensors", encode_tensors(model.parameters()))
    atomic_write(d / "model.json", dumps(meta).encode())


def load_checkpoint(directory, dtype=np.float32):
    """Rebuild a model from a checkpoint directory; returns ``(model, meta)``."""
    from .model import HybridModel

    d = Path(directory)
    try:
        meta = json.loads((d / "model.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from exc
    tensors = decode_tensors((d / "model.tensors").read_bytes())
    try:
        grid = GridSpec(meta["grid"]["n"], meta["grid"]["pitch"])
        basis = SpectrumBasis(meta["basis"]["k_n"], meta["basis"]["k_p"])
        st, ro = meta["stack"], meta["readout"]
        model = HybridModel.create(grid, basis, st["n_layers"], st["distance"], st["alpha"], st["beta"],
                                   tuple(ro["hidden"]), ro["temperature"], ro["head"], st["pad_factor"],
                                   rng=0, dtype=dtype, detector_gain=ro.get("detector_gain", 1.0))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"incomplete checkpoint metadata: {exc}") from exc
    params = model.parameters()
    if set(params) != set(tensors):
        raise FormatError(f"checkpoint tensors {sorted(tensors)} do not match the architecture")
    for k, p in params.items():
        if p.shape != tensors[k].shape:
            raise FormatError(f"tensor {k} has shape {tensors[k].shape}, expected {p.shape}")
        p[...] = tensors[k]
    return model, meta


# -- JSON, hashing, atomic writes --------------------------------------------------

def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=_json_default).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory, command: str, config: dict, seed, outputs: list[str], extra: dict | None = None) -> dict:
    """Manifest with config hash, seed, tool version and a digest per output file."""
    d = Path(directory)
    manifest = {
        "command": command,
        "tool": "oamspec",
        "version": __version__,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
        "outputs": {name: file_digest(d / name) for name in sorted(outputs)},
        **(extra or {}),
    }
    atomic_write(d / "manifest.json", dumps(manifest).encode())
    return manifest


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
