"""Reader/writer for the SVOL volume container.

One UTF-8 JSON header line {"magic":"SVOL1","dims":[nx,ny,nz],
"spacing":[sx,sy,sz],"dtype":"u8"|"f32"}, then raw little-endian voxels in
x-fastest order.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "SVOL1"
_DTYPES = {"u8": np.uint8, "f32": np.float32}


def write_svol(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    if data.ndim != 3 or data.size == 0:
        raise ValueError(f"need a non-empty 3-D array, got shape {data.shape}")
    if data.dtype == np.uint8:
        dtype_name = "u8"
    elif data.dtype == np.float32:
        dtype_name = "f32"
    else:
        raise ValueError(f"unsupported dtype {data.dtype}")
    header = json.dumps({
        "magic": MAGIC,
        "dims": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_name,
    }, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(data.astype(data.dtype.newbyteorder("<")).tobytes(order="F"))


def read_svol(path):
    """Returns (data, spacing)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path}: bad magic {header.get('magic')!r}")
        dims = tuple(header["dims"])
        dtype = np.dtype(_DTYPES[header["dtype"]]).newbyteorder("<")
        payload = f.read()
        n = dims[0] * dims[1] * dims[2]
        if len(payload) != n * dtype.itemsize:
            raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=dtype).astype(_DTYPES[header["dtype"]])
    return data.reshape(dims, order="F"), tuple(header["spacing"])
