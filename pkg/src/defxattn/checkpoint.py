"""Binary checkpoint format.

Layout (all little-endian)::

    b"DCAX" | uint32 version | uint64 header length | header JSON (utf-8) | float32 payload

The header holds the configuration echo and a tensor directory of
``{"name", "shape", "offset"}`` entries, offsets counted in float32 elements.
Keys are sorted and separators fixed, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .core import ParameterStore
from .errors import ConfigError, FormatError

MAGIC = b"DCAX"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
_PREFIX = struct.Struct("<4sIQ")


def encode(store: ParameterStore, config: dict | None = None, extra: dict | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name in sorted(store):
        arr = np.ascontiguousarray(store[name].data, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"config": config or {}, "tensors": directory, "n_values": offset}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(path: str, store: ParameterStore, config: dict | None = None, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(store, config, extra))


def decode(blob: bytes) -> tuple[ParameterStore, dict]:
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint truncated before the header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version not in SUPPORTED_VERSIONS:
        raise FormatError(f"checkpoint version {version} unsupported (supported: {list(SUPPORTED_VERSIONS)})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        tensors = header["tensors"]
        n_values = int(header["n_values"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[start + hlen:]
    if len(payload) != 4 * n_values:
        raise FormatError(f"payload has {len(payload)} bytes, header promises {4 * n_values}")
    values = np.frombuffer(payload, dtype="<f4")
    store = ParameterStore()
    for entry in tensors:
        try:
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            size = int(np.prod(shape))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"corrupt tensor directory entry {entry!r}: {exc}") from None
        if off < 0 or off + size > n_values:
            raise FormatError(f"tensor {entry.get('name')} lies outside the payload")
        store.add(entry["name"], values[off:off + size].astype(np.float64).reshape(shape))
    return store, header


def load(path: str, expected: ParameterStore | None = None) -> tuple[ParameterStore, dict]:
    """Read a checkpoint; with ``expected`` the tensor names and shapes must match it."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    store, header = decode(blob)
    if expected is not None:
        check_compatible(store, expected)
    return store, header


def check_compatible(store: ParameterStore, expected: ParameterStore) -> None:
    problems = []
    for name in sorted(set(store) | set(expected)):
        if name not in store:
            problems.append(f"{name} (missing)")
        elif name not in expected:
            problems.append(f"{name} (unexpected)")
        elif store[name].shape != expected[name].shape:
            problems.append(f"{name} (shape {store[name].shape} != {expected[name].shape})")
    if problems:
        shown = ", ".join(problems[:8]) + (f", ... {len(problems) - 8} more" if len(problems) > 8 else "")
        raise ConfigError(f"checkpoint does not match the model config: {shown}")
