"""Single-file binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian tensor blobs. The header carries the format version,
step counter, config snapshot, and a tensor table (name, dtype, shape,
offset, nbytes) with offsets relative to the end of the header.
"""

import json
import struct
from pathlib import Path

import numpy as np

from tinc.errors import ValidationError

MAGIC = b"TINCKPT1"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def save_checkpoint(path, tensors, config, step):
    """Write tensors (dict name -> array) plus config snapshot and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype == np.float32:
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype == np.int64:
            arr = arr.astype("<i8", copy=False)
        else:
            raise ValidationError(f"unsupported tensor dtype {arr.dtype} for {name}")
        blob = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors, config, step)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported checkpoint format {header['format_version']}")
    base = 16 + header_len
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ValidationError(f"{path}: unknown tensor dtype {entry['dtype']}")
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise ValidationError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data[start:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header["config"], header["step"]
