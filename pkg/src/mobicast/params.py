"""Parameter-dict utilities and byte-deterministic checkpoint files.

File layout: ASCII magic line, 8-byte little-endian header length, compact
JSON header (sorted keys) listing tensor names and shapes, then the tensors as
little-endian float64 in C order, params first, buffers after, each section in
the header's (sorted) order.
"""

from __future__ import annotations

import json
import os
from typing import Tuple

import numpy as np

from .errors import CheckpointError, NumericsError, ShapeError

MAGIC = b"MOBICAST-CKPT\n"
FORMAT_VERSION = 1


def clone_params(params: dict) -> dict:
    return {name: np.array(arr, dtype=np.float64, copy=True) for name, arr in params.items()}


def flatten_params(params: dict) -> Tuple[np.ndarray, list]:
    """Concatenate tensors (sorted by name) into one vector plus a shape spec."""
    spec = [(name, params[name].shape) for name in sorted(params)]
    if not spec:
        return np.zeros(0), spec
    vec = np.concatenate([np.asarray(params[name], dtype=np.float64).reshape(-1)
                          for name, _ in spec])
    return vec, spec


def restore_params(vec: np.ndarray, spec: list) -> dict:
    total = sum(int(np.prod(shape)) for _, shape in spec)
    if vec.size != total:
        raise ShapeError(f"restore_params: vector has {vec.size} entries, spec needs {total}")
    out = {}
    pos = 0
    for name, shape in spec:
        n = int(np.prod(shape))
        out[name] = np.asarray(vec[pos:pos + n], dtype=np.float64).reshape(shape).copy()
        pos += n
    return out


def _section_header(section: dict) -> list:
    return [[name, list(section[name].shape)] for name in sorted(section)]


def save_params(path: str, params: dict, buffers: dict, meta: dict) -> None:
    """Write params and buffers with a JSON meta block; bytes are deterministic."""
    for section in (params, buffers):
        for name, arr in section.items():
            if not np.all(np.isfinite(arr)):
                raise NumericsError(f"refusing to save non-finite tensor {name!r}")
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "params": _section_header(params),
        "buffers": _section_header(buffers),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for section in (params, buffers):
            for name in sorted(section):
                fh.write(np.ascontiguousarray(section[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_params(path: str) -> Tuple[dict, dict, dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path!r} is not a checkpoint file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path!r} is truncated")
    hlen = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path!r} has a corrupt header: {exc}") from exc
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path!r}: unsupported format_version "
                              f"{header.get('format_version')!r}")
    sections = []
    for key in ("params", "buffers"):
        out = {}
        for name, shape in header.get(key, []):
            n = int(np.prod(shape)) if shape else 1
            nbytes = n * 8
            if off + nbytes > len(raw):
                raise CheckpointError(f"{path!r}: blob too short for tensor {name!r}")
            arr = np.frombuffer(raw[off:off + nbytes], dtype="<f8").astype(np.float64)
            out[name] = arr.reshape([int(s) for s in shape])
            off += nbytes
        sections.append(out)
    if off != len(raw):
        raise CheckpointError(f"{path!r}: {len(raw) - off} trailing bytes after blob")
    params, buffers = sections
    for section in sections:
        for name, arr in section.items():
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"{path!r}: tensor {name!r} has non-finite values")
    return params, buffers, header.get("meta", {})
