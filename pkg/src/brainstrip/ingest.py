"""File I/O: single-file volumes with a 348-byte header, model bundles, reports.

Volume layout (offsets in bytes, all fields in the file's byte order)::

    0    int32     header size, always 348 (used to detect endianness)
    40   int16[8]  rank, nx, ny, nz, 1, 1, 1, 1
    70   int16     dtype code: 2 uint8, 4 int16, 16 float32
    72   int16     bits per voxel
    76   float32[8] pixdim; spacing (sx, sy, sz) at 80, 84, 88
    108  float32   voxel data offset (>= 352)
    148  char[80]  description; carries the orientation tag
    344  char[4]   magic "n+1\\0"

Voxels are stored x-fastest, which is the C order of ``Volume.data``.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .core import DEFAULT_ORIENTATION, Volume

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC = b"n+1\x00"
DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class FormatError(ValueError):
    pass


class UnsupportedError(FormatError):
    pass


class LengthError(FormatError):
    pass


class VersionError(FormatError):
    pass


def _header(shape_xyz, code, spacing, orientation) -> bytes:
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    dims = [3, *shape_xyz, 1, 1, 1, 1]
    struct.pack_into("<8h", buf, 40, *dims)
    struct.pack_into("<hh", buf, 70, code, np.dtype(DTYPES[code]).itemsize * 8)
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", buf, 108, float(DATA_OFFSET))
    desc = orientation.encode("ascii")[:79]
    buf[148:148 + len(desc)] = desc
    buf[344:348] = MAGIC
    return bytes(buf)


def write_volume(path, v: Volume, dtype=np.float32):
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise UnsupportedError(f"unsupported dtype {dtype}")
    nx, ny, nz = v.dims
    header = _header((nx, ny, nz), CODES[dtype], v.spacing, v.orientation)
    payload = np.ascontiguousarray(v.data.astype(dtype.newbyteorder("<"))).tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header + b"\x00" * (DATA_OFFSET - HEADER_SIZE) + payload)


def _parse(raw: bytes, path) -> tuple[np.ndarray, tuple, str]:
    if len(raw) < HEADER_SIZE:
        raise LengthError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    order = "<"
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        order = ">"
        if struct.unpack_from(">i", raw, 0)[0] != HEADER_SIZE:
            raise FormatError(f"{path}: header size field is not {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[344:348]!r}")
    dims = struct.unpack_from(order + "8h", raw, 40)
    rank = dims[0]
    if not 1 <= rank <= 3:
        raise UnsupportedError(f"{path}: rank {rank} not supported")
    shape = [max(1, d) for d in dims[1:4]]
    if any(d < 1 for d in dims[1:rank + 1]):
        raise FormatError(f"{path}: non-positive dims {dims[1:rank + 1]}")
    code = struct.unpack_from(order + "h", raw, 70)[0]
    if code not in DTYPES:
        raise UnsupportedError(f"{path}: dtype code {code} not supported")
    spacing = struct.unpack_from(order + "3f", raw, 80)
    offset = int(struct.unpack_from(order + "f", raw, 108)[0])
    if offset < DATA_OFFSET:
        raise FormatError(f"{path}: data offset {offset} < {DATA_OFFSET}")
    dtype = np.dtype(DTYPES[code]).newbyteorder(order)
    nx, ny, nz = shape
    need = nx * ny * nz * dtype.itemsize
    payload = raw[offset:]
    if len(payload) < need:
        raise LengthError(f"{path}: payload has {len(payload)} bytes, dims need {need}")
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(nz, ny, nx)
    desc = raw[148:228].split(b"\x00", 1)[0].decode("ascii", "replace") or DEFAULT_ORIENTATION
    spacing = tuple(float(s) if s > 0 else 1.0 for s in spacing)
    return data, spacing, desc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_volume(path) -> Volume:
    """Read a volume; intensities are returned as raw float64 values."""
    data, spacing, orientation = _parse(_read_bytes(path), path)
    return Volume(data.astype(np.float64), spacing, orientation)


def write_mask(path, mask, spacing=(1.0, 1.0, 1.0)):
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask labels must be in {0, 1}")
    v = Volume((m.astype(np.uint8) * 255), spacing)
    write_volume(path, v, np.uint8)


def read_mask(path) -> np.ndarray:
    """Read a {0,255} uint8 mask as a {0,1} uint8 array of shape (nz, ny, nx)."""
    data, _, _ = _parse(_read_bytes(path), path)
    if data.dtype != np.uint8:
        raise FormatError(f"{path}: masks must be stored as uint8")
    if not np.isin(data, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return (data == 255).astype(np.uint8)


# --- model bundles -------------------------------------------------------

BUNDLE_MAGIC = b"BSMB"
BUNDLE_VERSION = "brainstrip-bundle/1"


def _encode_arrays(state: dict) -> tuple[dict, list[bytes]]:
    meta, blobs = {}, []
    for key in sorted(state):
        value = state[key]
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            meta[key] = {"array": arr.dtype.str, "shape": list(arr.shape)}
            blobs.append(arr.tobytes())
        else:
            meta[key] = {"value": value}
    return meta, blobs


def save_bundle(path, state: dict, version: str = BUNDLE_VERSION):
    """Write a flat ``{name: ndarray | json scalar}`` mapping.

    Layout: magic, u32 version length, version, u64 meta length, JSON meta,
    then every array's raw little-endian bytes in sorted key order.
    """
    meta, blobs = _encode_arrays(state)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    vb = version.encode()
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(vb)) + vb)
        fh.write(struct.pack("<Q", len(meta_bytes)) + meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_bundle(path, version: str = BUNDLE_VERSION) -> dict:
    raw = _read_bytes(path)
    if raw[:4] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a model bundle")
    try:
        (vlen,) = struct.unpack_from("<I", raw, 4)
        pos = 8 + vlen
        if pos > len(raw):
            raise FormatError(f"{path}: version length {vlen} beyond end of file")
        found = raw[8:pos].decode()
        if found != version:
            raise VersionError(f"{path}: bundle version {found!r}, expected {version!r}")
        (mlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if pos + mlen > len(raw):
            raise FormatError(f"{path}: meta length {mlen} beyond end of file")
        meta = json.loads(raw[pos:pos + mlen])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt bundle header ({exc})") from exc
    pos += mlen
    state = {}
    for key in sorted(meta):
        entry = meta[key]
        if "array" in entry:
            dtype = np.dtype(entry["array"])
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + n > len(raw):
                raise LengthError(f"{path}: array {key!r} truncated")
            state[key] = np.frombuffer(raw[pos:pos + n], dtype=dtype).reshape(shape).copy()
            pos += n
        else:
            state[key] = entry["value"]
    if pos != len(raw):
        raise LengthError(f"{path}: {len(raw) - pos} trailing bytes")
    return state


# --- reports -------------------------------------------------------------

def write_report(stem, rows: list[dict]):
    """Rows of (subject, metric, plane, value) as ``stem.csv`` plus ``stem.json``."""
    stem = Path(stem)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["subject", "metric", "plane", "value"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in ("subject", "metric", "plane", "value")})
    stem.with_suffix(".csv").write_text(buf.getvalue())
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=1, sort_keys=True))


def write_csv(path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
