"""CTNS binary tensor format and multi-tensor checkpoint containers.

Layout of one CTNS record (all little-endian)::

    b"CTNS" | version u16 | dtype u8 | rank u8 | dims u64 * rank | data

dtype 0 is float32, 1 is float64.  Complex arrays are stored as real
tensors with an extra axis of size 2 (real plane, imaginary plane).
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def complex_to_planes(z, axis=1):
    """Split a complex array into real/imag planes stacked along `axis`."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=axis)


def planes_to_complex(a, axis=1):
    a = np.asarray(a)
    if a.shape[axis] != 2:
        raise TensorFormatError(f"expected 2 planes along axis {axis}, got {a.shape[axis]}")
    re = np.take(a, 0, axis=axis)
    im = np.take(a, 1, axis=axis)
    return re + 1j * im


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        if np.issubdtype(a.dtype, np.complexfloating):
            raise TensorFormatError("complex arrays must be split with complex_to_planes first")
        a = a.astype(np.float64)
    code = _CODES[a.dtype]
    header = MAGIC + struct.pack("<HBB", VERSION, code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode(buf, offset=0):
    """Decode one record starting at `offset`; returns (array, next_offset)."""
    view = memoryview(buf)
    if len(view) - offset < 8 or bytes(view[offset:offset + 4]) != MAGIC:
        raise TensorFormatError(f"bad CTNS magic at offset {offset}")
    version, code, rank = struct.unpack_from("<HBB", view, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported CTNS version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(view) - pos < 8 * rank:
        raise TensorFormatError("truncated CTNS header")
    dims = struct.unpack_from(f"<{rank}Q", view, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(view) - pos < nbytes:
        raise TensorFormatError(f"truncated CTNS payload: need {nbytes} bytes, have {len(view) - pos}")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims).copy()
    return arr.astype(dtype.newbyteorder("=")), pos + nbytes


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode(data)
    if end != len(data):
        raise TensorFormatError(f"{path}: {len(data) - end} trailing bytes after tensor")
    return arr


def save_bundle(directory, tensors: dict, header: dict | None = None,
                stem="model") -> str:
    """Write named tensors into `<stem>.ctns` plus a `manifest.txt` index.

    The manifest carries ``key=value`` header lines followed by one
    ``name<TAB>shape<TAB>offset`` line per tensor.  Returns the sha256 of
    the binary payload.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    lines = [f"{k}={v}" for k, v in (header or {}).items()]
    lines.append("# name\tshape\toffset")
    for name, arr in tensors.items():
        if "\t" in name or "\n" in name:
            raise TensorFormatError(f"invalid tensor name {name!r}")
        shape = "x".join(str(d) for d in np.shape(arr)) or "scalar"
        lines.append(f"{name}\t{shape}\t{blob.tell()}")
        blob.write(encode(arr))
    payload = blob.getvalue()
    (directory / f"{stem}.ctns").write_bytes(payload)
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return hashlib.sha256(payload).hexdigest()


def load_bundle(directory, stem="model"):
    """Inverse of :func:`save_bundle`; returns (tensors, header)."""
    directory = Path(directory)
    payload = (directory / f"{stem}.ctns").read_bytes()
    header, tensors = {}, {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if "\t" in line:
            name, shape, offset = line.split("\t")
            arr, _ = decode(payload, int(offset))
            expect = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            if arr.shape != expect:
                raise TensorFormatError(f"{name}: manifest shape {expect} != stored {arr.shape}")
            tensors[name] = arr
        else:
            key, _, value = line.partition("=")
            header[key] = value
    return tensors, header


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
