"""Binary and text file formats.

NVID video layout (little-endian)::

    offset  size  field
    0       4     magic b"NVID"
    4       4     u32 version (=1)
    8       12    u32 T, H, W
    20      16    f64 t0, f64 dt
    36      4THW  f32 values, frame-major then row-major

NDMD array container::

    b"NDMD", u32 version (=1), u32 n_entries, then per entry:
    u16 name length, utf-8 name, u8 dtype code, u8 ndim, u64 dims[ndim],
    u64 byte length, raw little-endian data.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import VideoGrid

NVID_MAGIC = b"NVID"
NVID_VERSION = 1
_NVID_HEADER = struct.Struct("<4sIIIIdd")

NDMD_MAGIC = b"NDMD"
NDMD_VERSION = 1
_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<c8"),
    5: np.dtype("<c16"),
    6: np.dtype("?"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


# ---------------------------------------------------------------- NVID


def nvid_dumps(video: VideoGrid) -> bytes:
    T, H, W = video.frames.shape
    header = _NVID_HEADER.pack(NVID_MAGIC, NVID_VERSION, T, H, W, video.t0, video.dt)
    return header + np.ascontiguousarray(video.frames, dtype="<f4").tobytes()


def nvid_loads(data: bytes, path=None) -> VideoGrid:
    if len(data) < 4 or data[:4] != NVID_MAGIC:
        raise FormatError("bad magic, not an NVID file", 0, path)
    if len(data) < _NVID_HEADER.size:
        raise FormatError("truncated NVID header", len(data), path)
    _, version, T, H, W, t0, dt = _NVID_HEADER.unpack_from(data)
    if version != NVID_VERSION:
        raise FormatError(f"unsupported NVID version {version} (reader supports {NVID_VERSION})", 4, path)
    if min(T, H, W) < 1:
        raise FormatError(f"invalid dimensions T={T} H={H} W={W}", 8, path)
    if not (np.isfinite(t0) and np.isfinite(dt) and dt > 0):
        raise FormatError("invalid time axis", 20, path)
    n = T * H * W
    end = _NVID_HEADER.size + 4 * n
    if len(data) < end:
        raise FormatError(f"truncated payload: expected {end} bytes, file has {len(data)}", len(data), path)
    if len(data) > end:
        raise FormatError(f"{len(data) - end} unexpected trailing bytes", end, path)
    values = np.frombuffer(data, dtype="<f4", count=n, offset=_NVID_HEADER.size).reshape(T, H, W)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise FormatError("non-finite sample", _NVID_HEADER.size + 4 * bad, path)
    return VideoGrid(values.astype(np.float32), t0, dt)


def nvid_write(path, video: VideoGrid) -> None:
    Path(path).write_bytes(nvid_dumps(video))


def nvid_read(path) -> VideoGrid:
    return nvid_loads(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- NDMD container


def ndmd_dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = dict(arrays)
    if meta is not None:
        entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype="u1")
    parts = [NDMD_MAGIC, struct.pack("<II", NDMD_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise TypeError(f"cannot store array {name!r} of dtype {arr.dtype}")
        raw_name = name.encode()
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def ndmd_loads(data: bytes, path=None) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 4 or data[:4] != NDMD_MAGIC:
        raise FormatError("bad magic, not an NDMD checkpoint", 0, path)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated checkpoint", len(data), path)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != NDMD_VERSION:
        raise FormatError(f"checkpoint version {version} not supported (reader supports {NDMD_VERSION})", 4, path)
    arrays = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode()
        except UnicodeDecodeError:
            raise FormatError("entry name is not utf-8", start, path) from None
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for entry {name!r}", pos - 2, path)
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"entry {name!r} byte length does not match its shape", pos - 8, path)
        arrays[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} unexpected trailing bytes", pos, path)
    meta = {}
    if "__meta__" in arrays:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


# ---------------------------------------------------------------- text outputs


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV file", 0, path)
    return rows[0], rows[1:]


def write_sidecar(path, config_hash: str, seed: int, **extra) -> Path:
    """Provenance record ``<path>.meta.json`` for an output artifact."""
    meta = {"config_hash": config_hash, "seed": int(seed), "tool_version": __version__, **extra}
    side = Path(str(path) + ".meta.json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return side


def write_nvid_stack(path, arrays: np.ndarray, dt: float = 1.0) -> None:
    """Write a stack of real images (e.g. mode real/imag parts) as an NVID file."""
    nvid_write(path, VideoGrid(np.asarray(arrays, dtype=np.float32), 0.0, dt))
