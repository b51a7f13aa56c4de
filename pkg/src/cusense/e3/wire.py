"""E3 message types and their framed binary codec.

Frame layout (little-endian throughout):

    length    u32   bytes that follow the length field (msg_type + body)
    msg_type  u8    0x01..0x07
    body      fixed-order fields per message type

Bodies:

    0x01 SetupRequest          manager_id u32
    0x02 SetupResponse         agent_id u32, fn_count u16,
                               fn_count x { id u32, name_len u8, name bytes }
    0x03 SubscriptionRequest   sub_id u32, data_type u8, period_ttis u32,
                               duration_ttis u32
    0x04 SubscriptionResponse  sub_id u32, status u8
    0x05 Indication            sub_id u32, tti u64, flags u8
                               [flags&1: data_type u8, buffer_index u8,
                                slot_offset_ttis u32, payload_bytes u64]
                               [flags&2: inline_len u32, inline bytes]
    0x06 ControlRequest        ctrl_id u32, action_code u32, payload_len u32,
                               payload bytes
    0x07 ControlAck            ctrl_id u32, status u8

The decoder is total over arbitrary byte strings: any malformed input raises
E3DecodeError, and no read ever goes past the declared frame length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAX_FRAME_LEN = 16 * 1024 * 1024
MAX_NAME_LEN = 255

T_SETUP_REQ = 0x01
T_SETUP_RESP = 0x02
T_SUB_REQ = 0x03
T_SUB_RESP = 0x04
T_INDICATION = 0x05
T_CONTROL_REQ = 0x06
T_CONTROL_ACK = 0x07

_FLAG_SLOT_REF = 0x01
_FLAG_INLINE = 0x02


class Status(IntEnum):
    OK = 0
    REJECTED = 1
    ERROR = 2


class E3EncodeError(Exception):
    pass


class E3DecodeError(Exception):
    pass


@dataclass(frozen=True)
class WireSlotRef:
    """SlotRef as carried inside an Indication."""

    data_type: int
    buffer_index: int
    slot_offset_ttis: int
    payload_bytes: int = 0


@dataclass(frozen=True)
class SetupRequest:
    manager_id: int


@dataclass(frozen=True)
class SetupResponse:
    agent_id: int
    functions: tuple[tuple[int, str], ...] = ()


@dataclass(frozen=True)
class SubscriptionRequest:
    sub_id: int
    data_type: int
    period_ttis: int
    duration_ttis: int = 0  # 0 = unbounded


@dataclass(frozen=True)
class SubscriptionResponse:
    sub_id: int
    status: Status


@dataclass(frozen=True)
class Indication:
    sub_id: int
    tti: int
    slot_ref: WireSlotRef | None = None
    inline_payload: bytes | None = None


@dataclass(frozen=True)
class ControlRequest:
    ctrl_id: int
    action_code: int
    payload: bytes = b""


@dataclass(frozen=True)
class ControlAck:
    ctrl_id: int
    status: Status


E3Message = (SetupRequest | SetupResponse | SubscriptionRequest | SubscriptionResponse
             | Indication | ControlRequest | ControlAck)


def _encode_body(msg: E3Message) -> tuple[int, bytes]:
    if isinstance(msg, SetupRequest):
        return T_SETUP_REQ, struct.pack("<I", msg.manager_id)
    if isinstance(msg, SetupResponse):
        parts = [struct.pack("<IH", msg.agent_id, len(msg.functions))]
        for fn_id, name in msg.functions:
            raw = name.encode("utf-8")
            if len(raw) > MAX_NAME_LEN:
                raise E3EncodeError(f"function name exceeds {MAX_NAME_LEN} bytes")
            parts.append(struct.pack("<IB", fn_id, len(raw)) + raw)
        return T_SETUP_RESP, b"".join(parts)
    if isinstance(msg, SubscriptionRequest):
        if msg.period_ttis < 1:
            raise E3EncodeError("period_ttis must be >= 1")
        return T_SUB_REQ, struct.pack("<IBII", msg.sub_id, msg.data_type,
                                      msg.period_ttis, msg.duration_ttis)
    if isinstance(msg, SubscriptionResponse):
        return T_SUB_RESP, struct.pack("<IB", msg.sub_id, int(msg.status))
    if isinstance(msg, Indication):
        if msg.slot_ref is None and msg.inline_payload is None:
            raise E3EncodeError("indication carries a slot_ref or an inline payload")
        flags = (_FLAG_SLOT_REF if msg.slot_ref is not None else 0) \
            | (_FLAG_INLINE if msg.inline_payload is not None else 0)
        parts = [struct.pack("<IQB", msg.sub_id, msg.tti, flags)]
        if msg.slot_ref is not None:
            r = msg.slot_ref
            parts.append(struct.pack("<BBIQ", r.data_type, r.buffer_index,
                                     r.slot_offset_ttis, r.payload_bytes))
        if msg.inline_payload is not None:
            parts.append(struct.pack("<I", len(msg.inline_payload)) + msg.inline_payload)
        return T_INDICATION, b"".join(parts)
    if isinstance(msg, ControlRequest):
        return T_CONTROL_REQ, struct.pack("<III", msg.ctrl_id, msg.action_code,
                                          len(msg.payload)) + msg.payload
    if isinstance(msg, ControlAck):
        return T_CONTROL_ACK, struct.pack("<IB", msg.ctrl_id, int(msg.status))
    raise E3EncodeError(f"not an E3 message: {type(msg).__name__}")


def encode(msg: E3Message) -> bytes:
    msg_type, body = _encode_body(msg)
    if 1 + len(body) > MAX_FRAME_LEN:
        raise E3EncodeError("frame exceeds 16 MiB")
    return struct.pack("<IB", 1 + len(body), msg_type) + body


class _Cursor:
    """Bounds-checked reader over one frame body."""

    __slots__ = ("data", "pos")

    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise E3DecodeError("truncated frame body")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise E3DecodeError(f"{len(self.data) - self.pos} trailing bytes in frame body")


def _decode_body(msg_type: int, body: memoryview) -> E3Message:
    c = _Cursor(body)
    if msg_type == T_SETUP_REQ:
        (manager_id,) = c.unpack("<I")
        c.done()
        return SetupRequest(manager_id)
    if msg_type == T_SETUP_RESP:
        agent_id, count = c.unpack("<IH")
        fns = []
        for _ in range(count):
            fn_id, name_len = c.unpack("<IB")
            try:
                name = bytes(c.take(name_len)).decode("utf-8")
            except UnicodeDecodeError as e:
                raise E3DecodeError(f"bad function name: {e}") from None
            fns.append((fn_id, name))
        c.done()
        return SetupResponse(agent_id, tuple(fns))
    if msg_type == T_SUB_REQ:
        sub_id, data_type, period, duration = c.unpack("<IBII")
        c.done()
        if period < 1:
            raise E3DecodeError("period_ttis must be >= 1")
        return SubscriptionRequest(sub_id, data_type, period, duration)
    if msg_type == T_SUB_RESP:
        sub_id, status = c.unpack("<IB")
        c.done()
        return SubscriptionResponse(sub_id, _status(status))
    if msg_type == T_INDICATION:
        sub_id, tti, flags = c.unpack("<IQB")
        if flags & ~(_FLAG_SLOT_REF | _FLAG_INLINE):
            raise E3DecodeError(f"unknown indication flags 0x{flags:02x}")
        if not flags:
            raise E3DecodeError("indication with neither slot_ref nor inline payload")
        slot_ref = None
        inline = None
        if flags & _FLAG_SLOT_REF:
            dt, buf_idx, off, nbytes = c.unpack("<BBIQ")
            if buf_idx > 1:
                raise E3DecodeError(f"buffer_index {buf_idx} out of range")
            slot_ref = WireSlotRef(dt, buf_idx, off, nbytes)
        if flags & _FLAG_INLINE:
            (ilen,) = c.unpack("<I")
            inline = bytes(c.take(ilen))
        c.done()
        return Indication(sub_id, tti, slot_ref, inline)
    if msg_type == T_CONTROL_REQ:
        ctrl_id, action, plen = c.unpack("<III")
        payload = bytes(c.take(plen))
        c.done()
        return ControlRequest(ctrl_id, action, payload)
    if msg_type == T_CONTROL_ACK:
        ctrl_id, status = c.unpack("<IB")
        c.done()
        return ControlAck(ctrl_id, _status(status))
    raise E3DecodeError(f"unknown msg_type 0x{msg_type:02x}")


def _status(value: int) -> Status:
    try:
        return Status(value)
    except ValueError:
        raise E3DecodeError(f"unknown status {value}") from None


def decode(data: bytes | memoryview) -> E3Message:
    """Decode exactly one frame; trailing bytes after it are an error."""
    msg, consumed = decode_frame(data)
    if msg is None:
        raise E3DecodeError("truncated frame")
    if consumed != len(data):
        raise E3DecodeError(f"{len(data) - consumed} trailing bytes after frame")
    return msg


def decode_frame(data: bytes | memoryview) -> tuple[E3Message | None, int]:
    """Decode one frame from the head of a stream buffer.

    Returns (message, bytes_consumed), or (None, 0) when the buffer does not
    yet hold one complete frame. Raises E3DecodeError for malformed frames.
    """
    view = memoryview(data)
    if len(view) < 4:
        return None, 0
    (length,) = struct.unpack_from("<I", view, 0)
    if length < 1:
        raise E3DecodeError("frame length below minimum (needs msg_type)")
    if length > MAX_FRAME_LEN:
        raise E3DecodeError(f"frame length {length} exceeds 16 MiB cap")
    if len(view) < 4 + length:
        return None, 0
    msg_type = view[4]
    msg = _decode_body(msg_type, view[5:4 + length])
    return msg, 4 + length
