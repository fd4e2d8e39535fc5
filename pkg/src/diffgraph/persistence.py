"""Portable on-disk containers.

Every binary body is raw row-major little-endian float32. A *matrix file*
is one JSON header line followed by the body::

    {"rows": R, "cols": C, "dtype": "f32le", "sha256": "<hex of body>"}\\n
    <R * C * 4 bytes>

Bundle formats (graph directory, ``vgae.bin``, payload files) are built on
the same primitives so that checksums and byte order are defined in one
place.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    ChecksumMismatchError,
    DimensionMismatchError,
    IoFailureError,
)

F32LE = np.dtype("<f4")
DTYPE_TAG = "f32le"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def to_f32_bytes(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype=F32LE)
    return arr.tobytes(order="C")


def from_f32_bytes(body: bytes, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(body) != expected:
        raise DimensionMismatchError(
            f"body holds {len(body)} bytes, shape {shape} needs {expected}"
        )
    # native float32 copy so callers never see a read-only or big-endian view
    return np.frombuffer(body, dtype=F32LE).astype(np.float32).reshape(shape)


def write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def read_bytes(path: str | os.PathLike) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc


def dump_header(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def split_header(blob: bytes, path: str | os.PathLike = "<bytes>") -> tuple[dict, bytes]:
    """Split ``<json line>\\n<body>`` into (header, body)."""
    nl = blob.find(b"\n")
    if nl < 0:
        raise IoFailureError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailureError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise IoFailureError(f"{path}: header is not a JSON object")
    return header, blob[nl + 1:]


def verify_checksum(body: bytes, expected: str, what: str) -> None:
    if sha256_hex(body) != expected:
        raise ChecksumMismatchError(f"{what}: sha256 mismatch")


def encode_matrix(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got ndim={matrix.ndim}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix contains non-finite entries")
    body = to_f32_bytes(matrix)
    rows, cols = matrix.shape
    header = {"rows": int(rows), "cols": int(cols), "dtype": DTYPE_TAG, "sha256": sha256_hex(body)}
    return dump_header(header) + body


def decode_matrix(blob: bytes, path: str | os.PathLike = "<bytes>") -> np.ndarray:
    header, body = split_header(blob, path)
    try:
        rows, cols, dtype, digest = header["rows"], header["cols"], header["dtype"], header["sha256"]
    except KeyError as exc:
        raise IoFailureError(f"{path}: header missing {exc}") from exc
    if dtype != DTYPE_TAG:
        raise IoFailureError(f"{path}: unsupported dtype {dtype!r}")
    if len(body) != rows * cols * 4:
        raise DimensionMismatchError(
            f"{path}: body holds {len(body)} bytes, header declares {rows}x{cols}"
        )
    verify_checksum(body, digest, str(path))
    return from_f32_bytes(body, (rows, cols))


def write_matrix(path: str | os.PathLike, matrix: np.ndarray) -> None:
    write_bytes(path, encode_matrix(matrix))


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    return decode_matrix(read_bytes(path), path)
