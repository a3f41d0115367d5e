"""Coordinator/worker execution of the two-round protocol."""

from .messages import Message, deserialize_message, serialize_message
from .protocol import FailurePolicy, ProtocolResult, Resampling, coordinate, run_protocol
from .transport import InProcessTransport, TcpTransport, serve_worker
from .worker import Worker

__all__ = [
    "FailurePolicy",
    "InProcessTransport",
    "Message",
    "ProtocolResult",
    "Resampling",
    "TcpTransport",
    "Worker",
    "coordinate",
    "deserialize_message",
    "run_protocol",
    "serialize_message",
    "serve_worker",
]
