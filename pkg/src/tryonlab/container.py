"""Bit-exact on-disk container for named float32 tensors.

Layout: one line of JSON (``{"byte_order": "little", "dtype": "f32",
"names": [...], "shapes": [...]}``) terminated by ``\\n``, followed by
the raw little-endian float32 payloads concatenated in name order.
Names are stored sorted so a given tensor set always serializes to the
same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import FormatError

Array = np.ndarray

_HEADER_KEYS = {"byte_order", "dtype", "names", "shapes"}


def write_tensor_container(path, tensors: Mapping[str, Array]) -> None:
    """Write named tensors to ``path``; round-trips bit-exactly."""
    if not tensors:
        raise ValueError("tensor set is empty")
    names = sorted(tensors)
    arrays = []
    shapes = []
    for name in names:
        if not name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        arrays.append(arr)
        shapes.append(list(arr.shape))
    header = {
        "byte_order": "little",
        "dtype": "f32",
        "names": names,
        "shapes": shapes,
    }
    payload = bytearray()
    payload += json.dumps(header, sort_keys=True).encode("utf-8")
    payload += b"\n"
    for arr in arrays:
        payload += arr.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(bytes(payload))


def read_tensor_container(path) -> Dict[str, Array]:
    """Inverse of :func:`write_tensor_container`.

    Raises :class:`FormatError` on malformed headers or truncated
    payloads, citing expected versus actual byte counts.
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError("no header line found")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict) or not _HEADER_KEYS <= set(header):
        raise FormatError(f"header missing keys: {sorted(_HEADER_KEYS)}")
    if header["dtype"] != "f32":
        raise FormatError(f"unsupported dtype {header['dtype']!r}")
    if header["byte_order"] != "little":
        raise FormatError(f"unsupported byte order {header['byte_order']!r}")
    names = header["names"]
    shapes = header["shapes"]
    if not isinstance(names, list) or not isinstance(shapes, list) or len(names) != len(shapes):
        raise FormatError("names/shapes mismatch in header")

    body = raw[newline + 1 :]
    expected = 0
    counts = []
    for name, shape in zip(names, shapes):
        if not all(isinstance(d, int) and d >= 1 for d in shape):
            raise FormatError(f"invalid shape {shape} for tensor {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        counts.append(n)
        expected += 4 * n
    if len(body) != expected:
        raise FormatError(
            f"payload truncated or padded: expected {expected} bytes, found {len(body)}"
        )

    out: Dict[str, Array] = {}
    offset = 0
    for name, shape, n in zip(names, shapes, counts):
        chunk = body[offset : offset + 4 * n]
        offset += 4 * n
        out[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    return out
