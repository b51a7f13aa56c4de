"""E3 codec: exact layouts, round-trips, malformed-input safety."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cusense.e3.wire import (
    ControlAck,
    ControlRequest,
    E3DecodeError,
    E3EncodeError,
    Indication,
    SetupRequest,
    SetupResponse,
    Status,
    SubscriptionRequest,
    SubscriptionResponse,
    WireSlotRef,
    decode,
    decode_frame,
    encode,
)


def test_subscription_response_exact_bytes():
    raw = encode(SubscriptionResponse(sub_id=7, status=Status.OK))
    # length u32 (type + body = 6), type 0x04, sub_id=7 LE, status=0
    assert raw == struct.pack("<IB", 6, 0x04) + struct.pack("<IB", 7, 0)


def test_control_ack_roundtrip():
    msg = ControlAck(ctrl_id=0, status=Status.OK)
    assert decode(encode(msg)) == msg


def test_indication_requires_ref_or_inline():
    with pytest.raises(E3EncodeError):
        encode(Indication(sub_id=1, tti=5))


def test_period_zero_rejected():
    with pytest.raises(E3EncodeError):
        encode(SubscriptionRequest(sub_id=1, data_type=1, period_ttis=0, duration_ttis=0))


def test_long_function_name_rejected():
    with pytest.raises(E3EncodeError):
        encode(SetupResponse(agent_id=1, functions=((1, "x" * 256),)))


def test_truncated_frame():
    raw = encode(SetupRequest(3))
    with pytest.raises(E3DecodeError, match="truncated"):
        decode(raw[:-1])


def test_length_larger_than_buffer_is_incomplete():
    raw = bytearray(encode(SetupRequest(3)))
    struct.pack_into("<I", raw, 0, 1000)
    msg, consumed = decode_frame(bytes(raw))
    assert msg is None and consumed == 0
    with pytest.raises(E3DecodeError, match="truncated"):
        decode(bytes(raw))


def test_unknown_msg_type():
    raw = struct.pack("<IB", 1, 0xFF)
    with pytest.raises(E3DecodeError, match="unknown msg_type"):
        decode(raw)


def test_trailing_bytes_rejected():
    raw = encode(SetupRequest(3)) + b"\x00"
    with pytest.raises(E3DecodeError, match="trailing"):
        decode(raw)


def test_oversized_length_field():
    raw = struct.pack("<I", 17 * 1024 * 1024) + b"\x01"
    with pytest.raises(E3DecodeError, match="16 MiB"):
        decode_frame(raw)


# -- property tests ----------------------------------------------------------

u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
status = st.sampled_from(list(Status))
name = st.text(min_size=0, max_size=60).filter(lambda s: len(s.encode()) <= 255)

slot_refs = st.builds(
    WireSlotRef,
    data_type=st.integers(0, 255),
    buffer_index=st.integers(0, 1),
    slot_offset_ttis=u32,
    payload_bytes=u64,
)

messages = st.one_of(
    st.builds(SetupRequest, manager_id=u32),
    st.builds(SetupResponse, agent_id=u32,
              functions=st.lists(st.tuples(u32, name), max_size=8).map(tuple)),
    st.builds(SubscriptionRequest, sub_id=u32, data_type=st.integers(0, 255),
              period_ttis=st.integers(1, 2**32 - 1), duration_ttis=u32),
    st.builds(SubscriptionResponse, sub_id=u32, status=status),
    st.builds(Indication, sub_id=u32, tti=u64,
              slot_ref=st.one_of(st.none(), slot_refs),
              inline_payload=st.one_of(st.none(), st.binary(max_size=128))
              ).filter(lambda m: m.slot_ref is not None or m.inline_payload is not None),
    st.builds(ControlRequest, ctrl_id=u32, action_code=u32,
              payload=st.binary(max_size=256)),
    st.builds(ControlAck, ctrl_id=u32, status=status),
)


@given(messages)
def test_roundtrip_identity(msg):
    assert decode(encode(msg)) == msg


@given(st.binary(max_size=200))
@settings(max_examples=500)
def test_fuzzed_bytes_never_crash(data):
    try:
        decode(data)
    except E3DecodeError:
        pass


@given(messages, st.integers(0, 40), st.binary(min_size=1, max_size=8))
def test_mutated_frames_never_crash(msg, pos, junk):
    raw = bytearray(encode(msg))
    pos = pos % len(raw)
    raw[pos:pos] = junk
    try:
        decode(bytes(raw))
    except E3DecodeError:
        pass
