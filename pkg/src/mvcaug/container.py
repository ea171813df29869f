"""Binary container shared by embedding archives and checkpoints.

Layout: one line of compact UTF-8 JSON (the header) terminated by ``\\n``,
followed by a payload of little-endian float32 values.  Byte offsets stored in
headers are relative to the first payload byte.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ParseError, StorageError

_LE_F32 = np.dtype("<f4")


def write_container(path, header: dict, arrays) -> None:
    path = Path(path)
    blob = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    if b"\n" in blob:
        raise ParseError("header must serialize to a single line")
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(blob + b"\n")
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes(order="C"))
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_container(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, payload)`` with the payload as a flat float32 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad header: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header is not an object")
    body = raw[nl + 1:]
    if len(body) % 4:
        raise ParseError(f"{path}: payload length {len(body)} is not a multiple of 4")
    return header, np.frombuffer(body, dtype=_LE_F32).astype(np.float32)
