"""Versioned on-disk container for particle models.

A checkpoint is a small binary file: a magic line, one JSON header line
(format version, model kind, config, array index), then the raw
little-endian bytes of each named array in index order.  Every model
family in this package (bilevel trainer, fixed-feature baselines, tabular
value oracles) writes through this module so the CLI can sniff `kind` and
dispatch loading.  The layout contains no timestamps; identical inputs
produce identical files byte for byte, which is what makes checkpoint
reproducibility checkable at the file level.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataFormatError

FORMAT_VERSION = 1

_MAGIC = b"mfldiv-checkpoint\n"


def save_container(path, kind: str, config: dict, arrays: dict) -> None:
    """Write a checkpoint; `config` must be JSON-serializable."""
    blobs = []
    index = []
    for name, value in arrays.items():
        arr = np.ascontiguousarray(value)
        if not np.issubdtype(arr.dtype, np.number):
            raise ValueError(f"array {name!r} has non-numeric dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "arrays": index,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(_MAGIC))
    if magic != _MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint container")
    line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable checkpoint header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: container version mismatch (file {version}, reader {FORMAT_VERSION})"
        )
    if "kind" not in header:
        raise DataFormatError(f"{path}: checkpoint header lacks a kind")
    return header


def load_container(path):
    """Read a checkpoint back as (kind, config dict, {name: array})."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        arrays = {}
        for entry in header.get("arrays", []):
            try:
                name = entry["name"]
                dtype = np.dtype(entry["dtype"])
                shape = tuple(int(s) for s in entry["shape"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: malformed array index ({exc})") from None
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise DataFormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return str(header["kind"]), header.get("config", {}), arrays


def peek_kind(path) -> str:
    """Read just the model kind without materializing arrays."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
    return str(header["kind"])
