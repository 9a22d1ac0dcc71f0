"""FTK1: a bit-exact binary container for named float32 tensors.

Layout::

    bytes 0..3    ASCII magic "FTK1"
    bytes 4..7    header length L, unsigned 32-bit little-endian
    bytes 8..8+L  UTF-8 JSON header, space-padded so the payload starts on a
                  64-byte file boundary
    then          payload: raw IEEE-754 f32, little-endian, row-major, at the
                  offsets the header declares (relative to payload start)

Header schema::

    {"format_version": 1, "dtype": "f32",
     "tensors": [{"name": ..., "shape": [...], "offset": ..., "nbytes": ...}],
     "meta": {...}}

Offsets are ascending, non-overlapping and 64-byte aligned; nbytes must equal
4 * product(shape).  Saving is atomic (temp file + rename).  Files are
deterministic: the same tensors and meta produce identical bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from pathlib import Path

import numpy as np

MAGIC = b"FTK1"
ALIGN = 64


class CheckpointError(Exception):
    """Base class for FTK1 failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _as_state(tree_or_state) -> dict:
    if hasattr(tree_or_state, "state"):
        return tree_or_state.state()
    return dict(tree_or_state)


def save_checkpoint(tree_or_state, meta: dict, path) -> None:
    """Write a ParamTree (or name -> array mapping) as an FTK1 file.

    Rejects empty trees and any non-float32 tensor; f64 state must be cast
    explicitly by the caller so precision loss is never silent.
    """
    state = _as_state(tree_or_state)
    if not state:
        raise CheckpointError("refusing to save an empty tree")
    entries = []
    offset = 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"tensor {name!r} has dtype {arr.dtype}; FTK1 stores float32 only"
            )
        nbytes = 4 * int(math.prod(arr.shape)) if arr.shape else 4
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset = _align(offset + nbytes)

    header = {
        "format_version": 1,
        "dtype": "f32",
        "tensors": entries,
        "meta": {str(k): str(v) for k, v in (meta or {}).items()},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    # pad with spaces so the payload begins on a 64-byte file boundary
    pad = (-(8 + len(hjson))) % ALIGN
    hjson += b" " * pad

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hjson)))
        f.write(hjson)
        pos = 0
        for entry, (name, arr) in zip(entries, state.items()):
            if entry["offset"] > pos:
                f.write(b"\x00" * (entry["offset"] - pos))
                pos = entry["offset"]
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(raw)
            pos += len(raw)
    os.replace(tmp, path)


def _validate_layout(entries) -> None:
    prev_end = 0
    seen = set()
    for e in entries:
        for key in ("name", "shape", "offset", "nbytes"):
            if key not in e:
                raise CheckpointHeaderError(f"tensor entry missing {key!r}: {e}")
        if e["name"] in seen:
            raise CheckpointHeaderError(f"duplicate tensor name {e['name']!r}")
        seen.add(e["name"])
        if e["offset"] % ALIGN != 0:
            raise CheckpointLayoutError(f"{e['name']!r} offset {e['offset']} not {ALIGN}-byte aligned")
        if e["offset"] < prev_end:
            raise CheckpointLayoutError(f"{e['name']!r} offset {e['offset']} overlaps previous tensor")
        expect = 4 * int(math.prod(e["shape"])) if e["shape"] else 4
        if e["nbytes"] != expect:
            raise CheckpointLayoutError(
                f"{e['name']!r} declares {e['nbytes']} bytes but shape {e['shape']} needs {expect}"
            )
        prev_end = e["offset"] + e["nbytes"]


def load_checkpoint(path, expected_tree=None):
    """Read an FTK1 file; returns (name -> float32 array mapping, meta).

    With ``expected_tree`` (a ParamTree or name -> shape mapping), every
    expected name must be present with a matching shape; extra names in the
    file are reported as warnings.
    """
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise CheckpointTruncatedError("file ends inside the length field")
    (hlen,) = struct.unpack("<I", data[4:8])
    hbytes = data[8 : 8 + hlen]
    if len(hbytes) != hlen:
        raise CheckpointTruncatedError(f"header declares {hlen} bytes, file has {len(hbytes)}")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointHeaderError(f"header is not valid JSON: {e}") from None
    if header.get("format_version") != 1:
        raise CheckpointHeaderError(f"unsupported format_version {header.get('format_version')!r}")
    if header.get("dtype") != "f32":
        raise CheckpointHeaderError(f"unsupported dtype {header.get('dtype')!r}")
    entries = header.get("tensors", [])
    _validate_layout(entries)

    payload = data[8 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointTruncatedError(
                f"{e['name']!r} needs {e['nbytes']} payload bytes at {e['offset']}, got {len(chunk)}"
            )
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = arr

    if expected_tree is not None:
        expected = (
            {p.name: p.tensor.data.shape for p in expected_tree.entries()}
            if hasattr(expected_tree, "entries")
            else {k: tuple(v) for k, v in expected_tree.items()}
        )
        for name, shape in expected.items():
            if name not in tensors:
                raise CheckpointShapeError(f"checkpoint is missing expected tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointShapeError(
                    f"shape mismatch for {name!r}: expected {tuple(shape)}, file has {tensors[name].shape}"
                )
        extra = [n for n in tensors if n not in expected]
        if extra:
            warnings.warn(f"checkpoint has {len(extra)} unused tensor(s): {extra[:5]}", stacklevel=2)

    return tensors, header.get("meta", {})


def load_into_tree(tree, path) -> dict:
    """Load a checkpoint into an existing tree, bitwise; returns the meta map."""
    tensors, meta = load_checkpoint(path, expected_tree=tree)
    tree.load_state(tensors, strict=True)
    return meta


def save_adam_state(opt, path, meta=None) -> None:
    """Optimizer state as a sibling FTK1 file under ``adam.`` name prefixes."""
    state = {"adam.t": np.array([opt.t], dtype=np.float32)}
    for name, m in opt.m.items():
        state[f"adam.m.{name}"] = m.astype(np.float32, copy=False)
    for name, v in opt.v.items():
        state[f"adam.v.{name}"] = v.astype(np.float32, copy=False)
    save_checkpoint(state, meta or {}, path)


def load_adam_state(opt, path) -> None:
    tensors, _ = load_checkpoint(path)
    if "adam.t" not in tensors:
        raise CheckpointError("not an optimizer-state file: missing 'adam.t'")
    opt.t = int(tensors["adam.t"][0])
    opt.m = {}
    opt.v = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            opt.m[name[len("adam.m.") :]] = arr.copy()
        elif name.startswith("adam.v."):
            opt.v[name[len("adam.v.") :]] = arr.copy()
