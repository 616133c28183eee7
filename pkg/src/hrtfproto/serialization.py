"""Shared binary container for model checkpoints and prototype archives.

Layout mirrors the dataset container: magic, little-endian u32 header length,
UTF-8 JSON header, then the declared arrays as little-endian float32 packed
back to back in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"HRTFCK01"
PROTOTYPE_MAGIC = b"HRTFPZ01"


class BlobFormatError(ValueError):
    pass


def write_blob(path, magic, header: dict, arrays):
    """arrays: ordered list of (name, ndarray); shapes go into the header."""
    manifest = []
    payload = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = dict(header)
    header["arrays"] = manifest
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)
    return path


def read_blob(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != magic:
        raise BlobFormatError(f"bad magic at offset 0: expected {magic!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobFormatError(f"header JSON unparseable: {exc}") from exc
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if end > len(raw):
            raise BlobFormatError(
                f"array {entry['name']!r} at offset {offset}: expected {count * 4} bytes, "
                f"got {len(raw) - offset}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        )
        offset = end
    if offset != len(raw):
        raise BlobFormatError(f"{len(raw) - offset} trailing bytes after declared arrays")
    return header, arrays


def save_checkpoint(path, kind, config: dict, module, buffers=()):
    """Persist a Module's parameters plus named side arrays (normalizer stats)."""
    arrays = [(f"param:{name}", p.data) for name, p in module.named_parameters()]
    arrays += [(f"buffer:{name}", arr) for name, arr in buffers]
    header = {"kind": kind, "config": config}
    return write_blob(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    """Returns (kind, config, params dict, buffers dict)."""
    header, arrays = read_blob(path, CHECKPOINT_MAGIC)
    params = {k[len("param:"):]: v for k, v in arrays.items() if k.startswith("param:")}
    buffers = {k[len("buffer:"):]: v for k, v in arrays.items() if k.startswith("buffer:")}
    return header["kind"], header["config"], params, buffers


def restore_parameters(module, params: dict):
    """Load arrays into a freshly constructed module, strict on names/shapes."""
    named = dict(module.named_parameters())
    missing = sorted(set(named) - set(params))
    extra = sorted(set(params) - set(named))
    if missing or extra:
        raise BlobFormatError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in named.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise BlobFormatError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)
    return module
