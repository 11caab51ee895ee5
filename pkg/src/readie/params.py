"""Named parameter storage and the binary snapshot file format.

A snapshot is a small header (format version, dtype, ordered name->shape
table, optional metadata dict) followed by the raw little-endian values in
header order. Optimizer state can ride along as extra named arrays under an
``opt.`` prefix so training can resume bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

SNAPSHOT_MAGIC = b"RDSNAP"
SNAPSHOT_VERSION = 1


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until all values lie within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    np.clip(out, -2.0 * std, 2.0 * std, out=out)
    return out.astype(dtype)


class ParameterStore:
    """Unique-named learnable tensors; shapes are frozen at creation."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Per-parameter gradients; parameters the loss never reached get zeros."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def fill_missing_grads(self) -> None:
        """Give parameters the loss never reached an explicit zero gradient."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(t.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}


def _pack_arrays(arrays: dict[str, np.ndarray], dtype: np.dtype, meta: dict | None) -> bytes:
    header = {
        "version": SNAPSHOT_VERSION,
        "dtype": np.dtype(dtype).name,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [SNAPSHOT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for arr in arrays.values():
        chunks.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())
    return b"".join(chunks)


def _unpack_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file (bad magic)")
    off = len(SNAPSHOT_MAGIC)
    (hlen,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    if header["version"] != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['version']}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * dtype.itemsize
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(np.dtype(header["dtype"]))
        off += nbytes
    return arrays, header.get("meta", {})


def save_snapshot(path: str | Path, store: ParameterStore, meta: dict | None = None,
                  optimizer_state: dict[str, np.ndarray] | None = None) -> str:
    """Write parameters (plus optional optimizer arrays) and return the sha256 hash."""
    arrays: dict[str, np.ndarray] = {name: t.data for name, t in store.items()}
    if optimizer_state:
        for key, arr in optimizer_state.items():
            arrays[f"opt.{key}"] = np.asarray(arr)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float64
    blob = _pack_arrays(arrays, dtype, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_snapshot(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict, str]:
    """Read a snapshot; returns (params, optimizer_state, meta, sha256)."""
    blob = Path(path).read_bytes()
    arrays, meta = _unpack_arrays(blob)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    opt_state = {k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")}
    return params, opt_state, meta, hashlib.sha256(blob).hexdigest()


def snapshot_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
