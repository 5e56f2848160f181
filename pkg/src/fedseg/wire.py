"""Canonical binary serialization and message framing.

Frame layout (all little-endian):
    magic "FNNU" | version 0x01 | msg_type u8 | sender_id u32 | round u32 |
    payload_len u64 | payload

State-dict payload layout:
    layer_count u32, then per layer: name_len u16 + UTF-8 name, dtype u8
    (0 = float32, 1 = float64), rank u8, dims u32 each, raw values
    little-endian row-major. Layers appear in the state dict's canonical
    order. Fingerprints and control payloads are UTF-8 JSON.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import (EncodingError, FramingError, ProtocolError, UsageError,
                     VersionError)
from .statedict import StateDict
from .tensor import Tensor

MAGIC = b"FNNU"
VERSION = 1
HEADER = struct.Struct("<4sBBIIQ")
HEADER_LEN = HEADER.size  # 22 bytes
MAX_PAYLOAD = 2 ** 32 - 1
SERVER_ID = 0xFFFFFFFF

DTYPE_F32 = 0
DTYPE_F64 = 1


class MsgType(IntEnum):
    HELLO = 0
    FINGERPRINT_SUBMIT = 1
    GLOBAL_FINGERPRINT_BCAST = 2
    STATE_DICT_SUBMIT = 3
    AGGREGATE_BCAST = 4
    ROUND_ACK = 5
    ABORT = 6
    SHUTDOWN = 7


@dataclass
class RoundMessage:
    msg_type: MsgType
    sender_id: int
    round: int
    payload: bytes = b""

    def json(self):
        return json.loads(self.payload.decode("utf-8"))


def json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def encode_state_dict(sd: StateDict, dtype: int = DTYPE_F64) -> bytes:
    if dtype not in (DTYPE_F32, DTYPE_F64):
        raise EncodingError(f"unknown dtype code {dtype}")
    out = io.BytesIO()
    out.write(struct.pack("<I", len(sd)))
    np_dtype = "<f4" if dtype == DTYPE_F32 else "<f8"
    for name, tensor in sd.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise EncodingError(f"layer name too long: {len(raw_name)} bytes")
        arr = tensor.data
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", dtype, arr.ndim))
        for d in arr.shape:
            out.write(struct.pack("<I", d))
        out.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    return out.getvalue()


def decode_state_dict(payload: bytes, node_id: int = 0,
                      round: int = 0) -> StateDict:
    buf = io.BytesIO(payload)

    def read(n):
        b = buf.read(n)
        if len(b) != n:
            raise FramingError("truncated state-dict payload")
        return b

    (count,) = struct.unpack("<I", read(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode("utf-8")
        dtype, rank = struct.unpack("<BB", read(2))
        if dtype not in (DTYPE_F32, DTYPE_F64):
            raise FramingError(f"unknown dtype code {dtype}")
        dims = [struct.unpack("<I", read(4))[0] for _ in range(rank)]
        size = 1
        for d in dims:
            size *= d
        width = 4 if dtype == DTYPE_F32 else 8
        np_dtype = "<f4" if dtype == DTYPE_F32 else "<f8"
        values = np.frombuffer(read(size * width), dtype=np_dtype)
        entries.append((name,
                        Tensor(values.astype(np.float64).reshape(dims))))
    if buf.read(1):
        raise FramingError("trailing bytes after state-dict payload")
    return StateDict(entries, node_id=node_id, round=round)


def frame(msg: RoundMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise EncodingError("payload exceeds 2^32-1 bytes")
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), msg.sender_id,
                       msg.round, len(msg.payload)) + msg.payload


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise FramingError(
                f"truncated stream: wanted {n} bytes, got {n - remaining}")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def unframe(stream) -> RoundMessage:
    header = _read_exact(stream, HEADER_LEN)
    magic, version, msg_type, sender_id, round_, payload_len = \
        HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    payload = _read_exact(stream, payload_len) if payload_len else b""
    return RoundMessage(mt, sender_id, round_, payload)


def unframe_bytes(data: bytes) -> RoundMessage:
    return unframe(io.BytesIO(data))


def write_state_dict_file(path, sd: StateDict, dtype: int = DTYPE_F64):
    with open(path, "wb") as fh:
        fh.write(encode_state_dict(sd, dtype=dtype))


def read_state_dict_file(path, node_id: int = 0, round: int = 0) -> StateDict:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_state_dict(data, node_id=node_id, round=round)


def dump_case(path_prefix, image, mask, spacing, seed=None):
    """Flat binary arrays plus a JSON sidecar (dims, spacing, seed)."""
    image = np.asarray(image, dtype="<f8")
    mask = np.asarray(mask, dtype="<f8")
    if image.shape != mask.shape:
        raise UsageError("image and mask shapes differ")
    with open(f"{path_prefix}.img.bin", "wb") as fh:
        fh.write(image.tobytes())
    with open(f"{path_prefix}.msk.bin", "wb") as fh:
        fh.write(mask.tobytes())
    sidecar = {"dims": list(image.shape),
               "spacing": [float(v) for v in spacing]}
    if seed is not None:
        sidecar["seed"] = int(seed)
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)


def load_case(path_prefix):
    with open(f"{path_prefix}.json") as fh:
        sidecar = json.load(fh)
    dims = sidecar["dims"]
    with open(f"{path_prefix}.img.bin", "rb") as fh:
        image = np.frombuffer(fh.read(), dtype="<f8").reshape(dims)
    with open(f"{path_prefix}.msk.bin", "rb") as fh:
        mask = np.frombuffer(fh.read(), dtype="<f8").reshape(dims)
    return image.copy(), mask.astype(np.uint8), sidecar["spacing"]
