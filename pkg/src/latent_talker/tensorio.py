"""Binary tensor container used by datasets and checkpoints.

A record is one UTF-8 JSON header line (``{"shape": [...], "dtype": "f32"}``
plus optional extra keys) terminated by a newline, followed by the raw
little-endian payload.  Dataset files hold a single anonymous f32 record;
checkpoint bundles start with a JSON manifest line and then hold one named
record per tensor (f64 so parameter round trips are bit-exact).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class TensorIOError(IOError):
    """Raised for malformed container files."""


def _header_bytes(shape, dtype: str, name: str | None = None) -> bytes:
    header = {"shape": list(shape), "dtype": dtype}
    if name is not None:
        header["name"] = name
    return (json.dumps(header) + "\n").encode("utf-8")


def _read_header_line(fh) -> dict:
    raw = fh.readline()
    if not raw:
        raise TensorIOError("unexpected end of file while reading header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorIOError(f"malformed header line: {raw[:80]!r}") from exc
    return header


def write_record(fh, array: np.ndarray, dtype: str = "f32", name: str | None = None) -> None:
    if dtype not in _DTYPES:
        raise TensorIOError(f"unsupported dtype {dtype!r}")
    data = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    fh.write(_header_bytes(array.shape, dtype, name))
    fh.write(data.tobytes())


def read_record(fh) -> tuple[str | None, np.ndarray]:
    header = _read_header_line(fh)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise TensorIOError(f"unsupported dtype {dtype!r} in header")
    shape = tuple(int(s) for s in header.get("shape", []))
    count = int(np.prod(shape)) if shape else 1
    np_dtype = _DTYPES[dtype]
    payload = fh.read(count * np_dtype.itemsize)
    if len(payload) != count * np_dtype.itemsize:
        raise TensorIOError("truncated payload")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return header.get("name"), arr.copy()


def save_array(path, array: np.ndarray, dtype: str = "f32") -> None:
    with open(path, "wb") as fh:
        write_record(fh, array, dtype=dtype)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _, arr = read_record(fh)
    return arr


def save_bundle(path, meta: dict, tensors: dict[str, np.ndarray], dtype: str = "f64") -> None:
    """Write a manifest line plus one named record per tensor.

    ``meta`` must be JSON-serializable; tensor order follows dict order and
    is recorded in the manifest.
    """
    manifest = dict(meta)
    manifest["tensors"] = list(tensors.keys())
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest) + "\n").encode("utf-8"))
        for name, arr in tensors.items():
            record_dtype = dtype
            if arr.dtype == np.float32:
                record_dtype = "f32"
            write_record(fh, arr, dtype=record_dtype, name=name)


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise TensorIOError(f"no such file: {path}")
    with open(path, "rb") as fh:
        manifest = _read_header_line(fh)
        names = manifest.get("tensors")
        if names is None:
            raise TensorIOError("missing tensor manifest")
        tensors = {}
        for expected in names:
            name, arr = read_record(fh)
            if name != expected:
                raise TensorIOError(f"tensor order mismatch: {name!r} != {expected!r}")
            tensors[name] = arr
    return manifest, tensors
