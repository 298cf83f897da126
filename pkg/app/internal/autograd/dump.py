"""Debug dump format: `dims d0 d1 ... dn\\n` followed by little-endian floats."""
import numpy as np

from . import DimensionError


def encode_tensor(array):
    array = np.asarray(array)
    dtype = "<f8" if array.dtype == np.float64 else "<f4"
    header = "dims " + " ".join(str(d) for d in array.shape) + "\n"
    return header.encode("utf-8") + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(payload):
    newline = payload.find(b"\n")
    if newline < 0 or not payload.startswith(b"dims"):
        raise DimensionError("tensor dump: missing 'dims' header line")
    dims = tuple(int(d) for d in payload[4:newline].decode("utf-8").split())
    body = payload[newline + 1:]
    count = int(np.prod(dims)) if dims else 1
    if count and len(body) == 8 * count:
        dtype = "<f8"
    elif len(body) == 4 * count:
        dtype = "<f4"
    else:
        raise DimensionError(f"tensor dump: {len(body)} bytes do not hold {count} floats")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype[1:]).copy()


def write_tensor(array, path):
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())
