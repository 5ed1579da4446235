"""Datagram protocol between the plant and the controller.

Wire layout (all little-endian):

    offset  size  field
    0       4     magic "SNMP"
    4       1     version, currently 1
    5       1     kind: 1 = pose, 2 = wheel rates, 3 = command
    6       4     sequence number (u32, per-sender, strictly increasing)
    10      8     timestamp [ns] (u64)
    18      8*k   payload doubles: pose -> (x, y, alpha); rates/command
                  -> (right, left)

Total sizes: pose 42 bytes, rates and command 34 bytes.  Decoding is strict:
wrong magic, version, kind or length produces a typed error, never a crash.
Receivers keep only the newest message per kind ("latest wins"): older
datagrams still in the socket buffer are counted and dropped, and sequence
numbers at or below the last seen one are ignored, so a reordered or
duplicated datagram can never roll state back.  Commands are idempotent
setpoints refreshed every control period, so there is no acknowledgement or
retransmission machinery.

Endpoints are single-owner: one thread sends or receives on an endpoint,
ownership replaces locking.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"SNMP"
VERSION = 1
HEADER = struct.Struct("<4sBBIQ")

DEFAULT_POSE_PORT = 47001
DEFAULT_RATE_PORT = 47002
DEFAULT_COMMAND_PORT = 47003

_MAX_DATAGRAM = 64


class MessageKind(enum.IntEnum):
    POSE = 1
    RATES = 2
    COMMAND = 3


_PAYLOAD_COUNT = {MessageKind.POSE: 3, MessageKind.RATES: 2, MessageKind.COMMAND: 2}
_PAYLOAD_STRUCT = {
    MessageKind.POSE: struct.Struct("<3d"),
    MessageKind.RATES: struct.Struct("<2d"),
    MessageKind.COMMAND: struct.Struct("<2d"),
}
MESSAGE_SIZE = {k: HEADER.size + 8 * n for k, n in _PAYLOAD_COUNT.items()}


class DecodeError(ValueError):
    """A datagram failed validation; `reason` is one of magic, version,
    kind, length."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    seq: int
    timestamp_ns: int
    payload: tuple

    def __post_init__(self):
        kind = MessageKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "payload", tuple(float(v) for v in self.payload))
        if len(self.payload) != _PAYLOAD_COUNT[kind]:
            raise InvalidArgumentError(
                f"{kind.name} payload needs {_PAYLOAD_COUNT[kind]} doubles, got {len(self.payload)}"
            )
        if not (0 <= self.seq <= 0xFFFFFFFF):
            raise InvalidArgumentError(f"sequence number out of u32 range: {self.seq}")
        if not (0 <= self.timestamp_ns <= 0xFFFFFFFFFFFFFFFF):
            raise InvalidArgumentError(f"timestamp out of u64 range: {self.timestamp_ns}")


def encode(message: Message) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, int(message.kind), message.seq, message.timestamp_ns)
    return head + _PAYLOAD_STRUCT[message.kind].pack(*message.payload)


def decode(data: bytes) -> Message:
    if len(data) > _MAX_DATAGRAM:
        raise DecodeError("length", f"datagram of {len(data)} bytes exceeds {_MAX_DATAGRAM}")
    if len(data) < HEADER.size:
        raise DecodeError("length", f"{len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, kind_raw, seq, timestamp = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise DecodeError("version", f"expected {VERSION}, got {version}")
    try:
        kind = MessageKind(kind_raw)
    except ValueError:
        raise DecodeError("kind", f"unknown message kind {kind_raw}") from None
    expected = MESSAGE_SIZE[kind]
    if len(data) != expected:
        raise DecodeError("length", f"{kind.name} needs {expected} bytes, got {len(data)}")
    payload = _PAYLOAD_STRUCT[kind].unpack_from(data, HEADER.size)
    return Message(kind, seq, timestamp, payload)


@dataclass
class ChannelStats:
    received: int = 0
    superseded: int = 0
    stale: int = 0
    gaps: int = 0
    decode_errors: int = 0
    send_errors: int = 0


def select_latest(messages, kind: MessageKind, last_seq: int | None):
    """Latest-wins policy over a drained batch of messages.

    Returns (chosen message or None, superseded count, stale count, gaps).
    The chosen message has the highest sequence number strictly above
    last_seq; fresher-batch siblings are superseded, repeats and rollbacks
    are stale, and gaps counts sequence numbers never observed.  The result
    does not depend on the arrival order of the batch.
    """
    fresh: dict[int, Message] = {}
    stale = 0
    for msg in messages:
        if msg.kind is not kind:
            continue
        if (last_seq is not None and msg.seq <= last_seq) or msg.seq in fresh:
            stale += 1
            continue
        fresh[msg.seq] = msg
    if not fresh:
        return None, 0, stale, 0
    best_seq = max(fresh)
    if last_seq is not None:
        gaps = best_seq - last_seq - len(fresh)
    else:
        gaps = best_seq - min(fresh) + 1 - len(fresh)
    return fresh[best_seq], len(fresh) - 1, stale, gaps


class Role(enum.Enum):
    POSE_SOURCE = "pose_source"
    RATE_SOURCE = "rate_source"
    COMMAND_SOURCE = "command_source"
    POSE_SINK = "pose_sink"
    RATE_SINK = "rate_sink"
    COMMAND_SINK = "command_sink"

    @property
    def is_source(self) -> bool:
        return self.name.endswith("SOURCE")

    @property
    def message_kind(self) -> MessageKind:
        return {
            "POSE": MessageKind.POSE,
            "RATE": MessageKind.RATES,
            "COMMAND": MessageKind.COMMAND,
        }[self.name.split("_")[0]]


class Endpoint:
    """Nonblocking single-kind UDP endpoint.

    Sources send datagrams with an auto-incrementing sequence number; sinks
    bind and expose a latest-only drain.
    """

    def __init__(self, role: Role, address: tuple[str, int]):
        self.role = role
        self.kind = role.message_kind
        self.address = (str(address[0]), int(address[1]))
        self.stats = ChannelStats()
        self._seq = 0
        self._last_seq: int | None = None
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setblocking(False)
        if not role.is_source:
            self.sock.bind(self.address)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, payload, timestamp_ns: int) -> bool:
        """Send one datagram; a failure is reported, not raised."""
        self._seq += 1
        msg = Message(self.kind, self._seq, int(timestamp_ns), tuple(payload))
        try:
            self.sock.sendto(encode(msg), self.address)
            return True
        except OSError:
            self.stats.send_errors += 1
            return False

    def drain(self) -> Message | None:
        """Return the newest valid message of this kind, or None.

        Never blocks; all older pending datagrams are consumed and counted.
        """
        batch = []
        while True:
            try:
                data, _ = self.sock.recvfrom(2048)
            except BlockingIOError:
                break
            except OSError:
                break
            try:
                batch.append(decode(data))
            except DecodeError:
                self.stats.decode_errors += 1
        best, superseded, stale, gaps = select_latest(batch, self.kind, self._last_seq)
        self.stats.superseded += superseded
        self.stats.stale += stale
        self.stats.gaps += gaps
        if best is not None:
            self.stats.received += 1
            self._last_seq = best.seq
        return best


def channel_endpoint(role: Role, address: tuple[str, int]) -> Endpoint:
    """Open an endpoint for the given role; see Endpoint."""
    return Endpoint(role, address)


def pose_message(seq: int, timestamp_ns: int, x: float, y: float, alpha: float) -> Message:
    return Message(MessageKind.POSE, seq, timestamp_ns, (x, y, alpha))


def rates_message(seq: int, timestamp_ns: int, right: float, left: float) -> Message:
    return Message(MessageKind.RATES, seq, timestamp_ns, (right, left))


def command_message(seq: int, timestamp_ns: int, right: float, left: float) -> Message:
    return Message(MessageKind.COMMAND, seq, timestamp_ns, (right, left))
