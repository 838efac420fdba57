"""Binary tensor-record container used by checkpoints and ground-truth flow files.

Layout (all integers little-endian):
  magic    8 bytes  b"FLOWVIP\\0"
  version  uint32
  config   uint64 length + utf-8 text (the run-config echo; may be empty)
  meta     uint64 length + utf-8 JSON object
  count    uint64
  records  repeated: name(uint32 len + utf-8), dtype code uint8
           (1 = float64, 2 = float32), ndim uint8, dims uint64 each,
           raw little-endian payload

Round-trips are bit-exact: payloads are the raw scalar buffers.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import DataError

MAGIC = b"FLOWVIP\x00"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


def write_records(path, records, config_text="", meta=None):
    """records: mapping name -> ndarray (float32/float64)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = config_text.encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<Q", len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                raise ValueError(f"record {name!r}: unsupported dtype {arr.dtype}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", _DTYPE_CODES[dt]))
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated record file while reading {what}")
    return buf


def read_records(path):
    """Returns (records dict, config_text, meta dict)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open record file {path}: {exc}") from None
    with fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise DataError(f"{path}: bad magic, not a tensor record file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        (clen,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        config_text = _read_exact(fh, clen, "config").decode("utf-8")
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        meta = json.loads(_read_exact(fh, mlen, "meta").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "record count"))
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            if code not in _CODE_DTYPES:
                raise DataError(f"{path}: unknown dtype code {code} for {name!r}")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0] for _ in range(ndim)
            )
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
            payload = _read_exact(fh, nbytes, f"payload of {name!r}")
            records[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        return records, config_text, meta
