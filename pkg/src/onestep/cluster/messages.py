"""Protocol messages and their wire framing.

A frame is a 4-byte big-endian length (counting everything after it), one
version byte, then a canonical JSON body with sorted keys.  Floats are
written with Python's shortest round-trip repr, so decoding an encoded
message gives back bit-identical numbers.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import FrameTooLarge, MalformedFrame, NonFiniteInput, VersionMismatch
from ..linalg import symmetry_tolerance

VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")

ASSIGN_SHARD = "AssignShard"
REQUEST_LOCAL_ESTIMATE = "RequestLocalEstimate"
LOCAL_ESTIMATE = "LocalEstimate"
BROADCAST_THETA0 = "BroadcastTheta0"
REQUEST_GRAD_HESS = "RequestGradHess"
GRAD_HESS = "GradHess"
FAILURE = "Failure"
DONE = "Done"

KINDS = (
    ASSIGN_SHARD,
    REQUEST_LOCAL_ESTIMATE,
    LOCAL_ESTIMATE,
    BROADCAST_THETA0,
    REQUEST_GRAD_HESS,
    GRAD_HESS,
    FAILURE,
    DONE,
)


def _check_payload(value, path="payload"):
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise NonFiniteInput(f"{path} is not finite ({value!r})")
        return
    if isinstance(value, list):
        for i, v in enumerate(value):
            _check_payload(v, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise MalformedFrame(f"{path} has a non-string key {k!r}")
            _check_payload(v, f"{path}.{k}")
        return
    raise MalformedFrame(f"{path} has unsupported type {type(value).__name__}")


def _check_matrix(hess, path):
    if not (isinstance(hess, list) and all(isinstance(r, list) and len(r) == len(hess) for r in hess)):
        raise MalformedFrame(f"{path} is not a square matrix")
    a = np.array(hess, dtype=float)
    if a.size and np.max(np.abs(a - a.T)) > symmetry_tolerance(a):
        raise MalformedFrame(f"{path} is not symmetric")


@dataclass(frozen=True)
class Message:
    kind: str
    machine_id: int
    round: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MalformedFrame(f"unknown message kind {self.kind!r}")
        if isinstance(self.machine_id, bool) or not isinstance(self.machine_id, int) or self.machine_id < 0:
            raise MalformedFrame(f"machine_id must be a nonnegative integer, got {self.machine_id!r}")
        if self.round not in (1, 2) or isinstance(self.round, bool):
            raise MalformedFrame(f"round must be 1 or 2, got {self.round!r}")
        if not isinstance(self.payload, dict):
            raise MalformedFrame("payload must be a mapping")
        _check_payload(self.payload)
        if "hess" in self.payload:
            _check_matrix(self.payload["hess"], "payload.hess")
            grad = self.payload.get("grad")
            if grad is not None and len(grad) != len(self.payload["hess"]):
                raise MalformedFrame("gradient and Hessian dimensions differ")

    def to_dict(self):
        return {"kind": self.kind, "machine_id": self.machine_id, "round": self.round, "payload": self.payload}


def vec(a):
    """Array to a payload list of Python floats."""
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def mat(a):
    return [[float(v) for v in row] for row in np.asarray(a, dtype=float)]


def serialize_message(msg: Message) -> bytes:
    try:
        body = json.dumps(msg.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise NonFiniteInput(str(exc)) from None
    raw = body.encode("utf-8")
    length = 1 + len(raw)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(length) + bytes([VERSION]) + raw


def _reject_constant(name):
    raise MalformedFrame(f"non-finite literal {name} in frame")


def decode_body(data: bytes) -> Message:
    """Decode everything after the length prefix (version byte + body)."""
    if len(data) < 1:
        raise MalformedFrame("empty frame")
    if data[0] != VERSION:
        raise VersionMismatch(f"frame version {data[0]}, expected {VERSION}")
    try:
        obj = json.loads(data[1:].decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"undecodable body: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"kind", "machine_id", "round", "payload"}:
        raise MalformedFrame("body must hold exactly kind, machine_id, round and payload")
    return Message(obj["kind"], obj["machine_id"], obj["round"], obj["payload"])


def deserialize_message(frame: bytes) -> Message:
    if len(frame) < _HEADER.size:
        raise MalformedFrame("frame shorter than its length prefix")
    (length,) = _HEADER.unpack_from(frame)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    if len(frame) - _HEADER.size != length:
        raise MalformedFrame(f"declared length {length}, got {len(frame) - _HEADER.size} bytes")
    return decode_body(frame[_HEADER.size:])


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_message(sock) -> Message:
    (length,) = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    return decode_body(_recv_exact(sock, length))


def write_message(sock, msg: Message):
    sock.sendall(serialize_message(msg))
