import hashlib
import os
from logging import getLogger

import ujson
from semver import Version

from app.const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from app.internal.autograd import DimensionError
from app.internal.autograd.dump import decode_tensor, encode_tensor


log = getLogger("SSL")


class CheckpointIntegrityError(Exception):
    """Raised when a checkpoint file is truncated, corrupt or fails its checksum

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="checkpoint failed integrity check"):
        self.msg = msg
        super().__init__(self.msg)


class CheckpointVersionError(Exception):
    """Raised when a checkpoint was written by an incompatible format version

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="unsupported checkpoint format version"):
        self.msg = msg
        super().__init__(self.msg)


def is_format_compatible(version):
    return version.major == CHECKPOINT_FORMAT_VERSION.major and version <= CHECKPOINT_FORMAT_VERSION


def encode_checkpoint(tensors, metadata):
    """Serialize named arrays and JSON-able metadata.

    Layout: `<magic> <version>\\n`, one JSON header line with the blob's
    sha256, byte length and per-tensor (name, offset, length) index, then the
    blob of tensor dumps in name order.
    """
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        chunk = encode_tensor(tensors[name])
        index.append({"name": name, "offset": offset, "length": len(chunk)})
        chunks.append(chunk)
        offset += len(chunk)
    blob = b"".join(chunks)

    header = {
        "sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
        "index": index,
        "metadata": metadata,
    }
    first = CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_FORMAT_VERSION).encode() + b"\n"
    return first + ujson.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob


def decode_checkpoint(payload):
    first_end = payload.find(b"\n")
    if first_end < 0 or not payload.startswith(CHECKPOINT_MAGIC + b" "):
        raise CheckpointIntegrityError("missing checkpoint magic line")
    try:
        version = Version.parse(payload[len(CHECKPOINT_MAGIC) + 1:first_end].decode("ascii"))
    except ValueError:
        raise CheckpointIntegrityError("unreadable checkpoint format version")
    if not is_format_compatible(version):
        raise CheckpointVersionError(f"checkpoint format {version} is not readable by format {CHECKPOINT_FORMAT_VERSION}")

    header_end = payload.find(b"\n", first_end + 1)
    if header_end < 0:
        raise CheckpointIntegrityError("checkpoint header is truncated")
    try:
        header = ujson.loads(payload[first_end + 1:header_end].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise CheckpointIntegrityError("checkpoint header is not valid JSON")
    if not isinstance(header, dict):
        raise CheckpointIntegrityError(f"checkpoint header is a JSON {type(header).__name__}, not an object")

    blob = payload[header_end + 1:]
    if len(blob) != header.get("blob_bytes"):
        raise CheckpointIntegrityError(f"checkpoint blob holds {len(blob)} bytes, header says {header.get('blob_bytes')}")
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise CheckpointIntegrityError("checkpoint blob checksum mismatch")

    tensors = {}
    try:
        for entry in header["index"]:
            start = entry["offset"]
            tensors[entry["name"]] = decode_tensor(blob[start:start + entry["length"]])
        metadata = header["metadata"]
    except (KeyError, TypeError, DimensionError) as e:
        raise CheckpointIntegrityError(f"checkpoint index is inconsistent: {e!r}")
    return tensors, metadata


def save_checkpoint(path, tensors, metadata):
    payload = encode_checkpoint(tensors, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
    log.info(f"checkpoint written to {path} ({len(payload)} bytes)")


def load_checkpoint(path):
    with open(path, "rb") as f:
        payload = f.read()
    return decode_checkpoint(payload)
