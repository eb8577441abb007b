"""Data model, binary tensor files, run configuration and checkpoints.

Array conventions used across the package:

* single image ``(H, W)`` complex or real
* multi-coil image / k-space ``(N, H, W)`` complex
* sampling mask ``(H, W)`` bool
* label map ``(H, W)`` uint8, classes 0=background, 1=CSF, 2=GM, 3=WM
* probability map ``(C, H, W)`` float

The ``PMRI`` tensor file layout (all integers little-endian)::

    bytes 0-3   b"PMRI"
    byte  4     version (1)
    byte  5     dtype code (0=f32, 1=f64, 2=c64, 3=u8)
    byte  6     ndim
    byte  7     reserved, 0
    then        ndim x u32 shape
    then        raw payload, C order
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PMRI"
VERSION = 1
NUM_CLASSES = 4
CLASS_NAMES = ("background", "csf", "gm", "wm")

_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<c8"),
    3: np.dtype("u1"),
}


class TensorFormatError(ValueError):
    """Raised when a PMRI tensor file is malformed or truncated."""


class ConfigError(ValueError):
    """Raised for a malformed or out-of-range configuration value."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


# ---------------------------------------------------------------------------
# tensor files


def _dtype_code(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for code, known in _CODE_TO_DTYPE.items():
        if dt == known:
            return code
    raise TypeError(
        f"unsupported dtype {arr.dtype}; cast to float32, float64, complex64 or uint8")


def encode_tensor(tensor) -> bytes:
    """Serialize an array into PMRI bytes."""
    arr = np.asarray(tensor)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def _read_exact(fh, n, what, path):
    data = fh.read(n)
    if len(data) < n:
        raise TensorFormatError(
            f"{path}: truncated {what}: missing {n - len(data)} bytes "
            f"(expected {n}, got {len(data)})")
    return data


def read_tensor_from(fh: BinaryIO, path="<stream>") -> np.ndarray:
    """Read one PMRI record from an open binary stream."""
    head = _read_exact(fh, 8, "header", path)
    if head[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {head[:4]!r}")
    version, code, ndim, _ = struct.unpack("<BBBB", head[4:])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape", path))
    dtype = _CODE_TO_DTYPE[code]
    nbytes = dtype.itemsize * math.prod(shape)
    payload = _read_exact(fh, nbytes, "payload", path)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, tensor) -> None:
    """Write ``tensor`` to ``path`` in PMRI format.

    Bool arrays are stored as uint8. Other dtypes outside the four supported
    codes raise ``TypeError``; callers cast explicitly (e.g. complex128 ->
    complex64) so that a round trip is always bit-exact.
    """
    data = encode_tensor(tensor)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return read_tensor_from(fh, path)
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# validation helpers


def check_multicoil(x, name="image"):
    """Validate a ``(N, H, W)`` multi-coil array and return it."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"{name} must have shape (N, H, W) with N >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_probmap(p, atol=1e-6):
    p = np.asarray(p)
    if p.ndim != 3:
        raise ValueError(f"probability map must be (C, H, W), got {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=0), 1.0, atol=atol, rtol=0):
        raise ValueError("probability map is not normalized per pixel")
    return p


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """One simulated acquisition.

    ``kspace`` is zero at unsampled locations. ``reference`` is the
    sum-of-squares magnitude of the noiseless coil images. ``labels`` is
    ``None`` for an unlabelled dataset.
    """

    kspace: np.ndarray
    mask: np.ndarray
    sens: np.ndarray
    reference: np.ndarray
    labels: np.ndarray | None = None
    seed: int = 0
    accel: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        check_multicoil(self.kspace, "kspace")
        check_multicoil(self.sens, "sens")
        shape = self.kspace.shape[1:]
        if self.mask.shape != shape or self.sens.shape != self.kspace.shape:
            raise ValueError("inconsistent dataset shapes")
        if self.reference.shape != shape:
            raise ValueError("reference shape does not match k-space")
        if self.labels is not None:
            if self.labels.shape != shape:
                raise ValueError("label shape does not match k-space")
            if self.labels.max(initial=0) >= NUM_CLASSES:
                raise ValueError("label index out of range")
        if np.any(self.kspace[:, ~self.mask.astype(bool)] != 0):
            raise ValueError("k-space has nonzero entries at unsampled locations")

    @property
    def labelled(self):
        return self.labels is not None

    @property
    def shape(self):
        return self.kspace.shape

    @property
    def sampled_fraction(self):
        return float(np.mean(self.mask))

    def without_labels(self):
        return dataclasses.replace(self, labels=None)


def save_dataset(directory, ds: Dataset, extra=None) -> None:
    """Write a dataset bundle: PMRI member files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "kspace": "kspace.pmri",
        "mask": "mask.pmri",
        "sens": "sens.pmri",
        "reference": "reference.pmri",
    }
    write_tensor(d / files["kspace"], ds.kspace.astype(np.complex64))
    write_tensor(d / files["mask"], ds.mask.astype(np.uint8))
    write_tensor(d / files["sens"], ds.sens.astype(np.complex64))
    write_tensor(d / files["reference"], ds.reference.astype(np.float32))
    if ds.labels is not None:
        files["labels"] = "labels.pmri"
        write_tensor(d / files["labels"], ds.labels.astype(np.uint8))
    manifest = {
        "files": files,
        "seed": int(ds.seed),
        "accel": float(ds.accel),
        "noise": float(ds.noise),
        "shape": list(ds.shape),
        "sampled_fraction": ds.sampled_fraction,
    }
    if extra:
        manifest.update(extra)
    write_json(d / "manifest.json", manifest)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    files = manifest["files"]
    labels = read_tensor(d / files["labels"]) if "labels" in files else None
    return Dataset(
        kspace=read_tensor(d / files["kspace"]),
        mask=read_tensor(d / files["mask"]).astype(bool),
        sens=read_tensor(d / files["sens"]),
        reference=read_tensor(d / files["reference"]),
        labels=labels,
        seed=int(manifest["seed"]),
        accel=float(manifest["accel"]),
        noise=float(manifest["noise"]),
    )


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys, fixed indentation, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """All tunable knobs of a run. Key names match the JSON config file."""

    patch_size: int = 8
    patch_stride: int = 4
    lam: float = 100.0
    clear_lam: float = 1e-4
    unrolls: int = 3
    alpha: float = 1e-4
    eps_scale: float = 0.01
    eps_decay: float = 0.2
    eps_floor: float = 1e-8
    clear_iters: int = 15
    rank_tol: float = 1e-3
    cg_tol: float = 1e-8
    cg_maxiter: int = 200
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    labelled_fraction: float = 1.0
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size", "must be >= 1")
        if not 1 <= self.patch_stride <= self.patch_size:
            raise ConfigError("patch_stride", "must satisfy 1 <= stride <= patch_size")
        if not self.lam > 0:
            raise ConfigError("lam", "must be > 0")
        if self.clear_lam < 0:
            raise ConfigError("clear_lam", "must be >= 0")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha", "alpha out of range [0, 1)")
        if self.unrolls < 0:
            raise ConfigError("unrolls", "must be >= 0")
        if not self.eps_scale > 0:
            raise ConfigError("eps_scale", "must be > 0")
        if not 0 < self.eps_decay <= 1:
            raise ConfigError("eps_decay", "must be in (0, 1]")
        if not 0 < self.rank_tol < 1:
            raise ConfigError("rank_tol", "must be in (0, 1)")
        if not self.cg_tol > 0:
            raise ConfigError("cg_tol", "must be > 0")
        if self.cg_maxiter < 1:
            raise ConfigError("cg_maxiter", "must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if not 0 < self.labelled_fraction <= 1:
            raise ConfigError("labelled_fraction", "must be in (0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.width < 1:
            raise ConfigError("width", "must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def config_from_dict(values: dict) -> RunConfig:
    """Build a RunConfig from a mapping, coercing and validating each key."""
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        kind = _FIELD_TYPES[key]
        if isinstance(value, bool):
            raise ConfigError(key, f"malformed value {value!r}")
        try:
            if kind == "int":
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"malformed value {value!r}") from None
        if kind == "float" and not math.isfinite(kwargs[key]):
            raise ConfigError(key, "must be finite")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    """Load a JSON key-value config; missing keys take the defaults.

    An empty (or whitespace-only) file yields ``RunConfig()``.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return RunConfig()
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError("<document>", "top level must be an object")
    return config_from_dict(values)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named parameter tensors into one file.

    The file is a concatenation of PMRI records: first a uint8 record holding
    a UTF-8 JSON manifest (``names`` in storage order plus ``meta``), then one
    record per parameter.
    """
    names = sorted(params)
    manifest = {"names": names, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [encode_tensor(np.frombuffer(blob, dtype=np.uint8))]
    parts += [encode_tensor(params[n]) for n in names]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        for part in parts:
            fh.write(part)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, meta)`` from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        manifest = json.loads(read_tensor_from(fh, path).tobytes().decode("utf-8"))
        params = {name: read_tensor_from(fh, path) for name in manifest["names"]}
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after last record")
    return params, manifest["meta"]
