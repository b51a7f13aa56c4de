"""Per-TTI telemetry plane: ping-pong slot buffers in named shared memory.

One writer (the RAN side) publishes one record per TTI and data type; any
number of read-only consumers attach by name and read slots without ever
blocking the writer. Consistency is per-slot seqlock: even sequence = stable,
odd = write in progress, and a reader accepts a snapshot only if the sequence
is even and unchanged across the copy.

Region layout (all fields little-endian, offsets from the mapped base):

    Header (40 bytes)
      0   magic          8s   "DAPPSHM1"
      8   version        u32  (currently 1)
      12  region_count   u32
      16  tti_period_ns  u64
      24  writer_lease   u64  (0 = free, else opaque token)
      32  reserved       u64
    Region descriptors (region_count x 32 bytes, at offset 40)
      0   data_type          u32
      4   slots_per_buffer   u32
      8   slot_payload_bytes u64
      16  ping_offset        u64
      24  pong_offset        u64
    Region states (region_count x 32 bytes, after the descriptors)
      0   active_buffer    u32  (0 = ping, 1 = pong)
      4   write_slot_index u32
      8   swap_generation  u64
      16  total_writes     u64
      24  latest_tti       u64
    Slot (stride = 24 + slot_payload_bytes, rounded up to 64)
      0   seq         u64  (0 = never written; odd = write in progress)
      8   tti         u64
      16  payload_len u32
      20  pad         u32
      24  payload     bytes

Buffer discipline: writes land in the active buffer at write_slot_index;
when the index wraps, the active buffer flips and swap_generation increments.
After k total writes to a region with S slots per buffer, the write landed in
buffer (k // S) % 2 at slot k % S.
"""

from __future__ import annotations

import os
import secrets
import struct
from dataclasses import dataclass
from enum import IntEnum
from multiprocessing import shared_memory, resource_tracker

MAGIC = b"DAPPSHM1"
VERSION = 1

HEADER_FMT = "<8sIIQQQ"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 40
DESC_FMT = "<IIQQQ"
DESC_SIZE = struct.calcsize(DESC_FMT)  # 32
STATE_FMT = "<IIQQQ"
STATE_SIZE = struct.calcsize(STATE_FMT)  # 32
SLOT_HEADER_SIZE = 24
SLOT_ALIGN = 64

DEFAULT_CAPACITY_CAP = 1 << 30  # 1 GiB
PLANE_NAME_ENV = "SENSE_PLANE_NAME"
DEFAULT_PLANE_NAME = "cusense-plane"

# u64 offsets within a region state block
_LEASE_OFF = 24


class DataType(IntEnum):
    IQ = 0
    HEST = 1
    MAC_PDU = 2
    FAPI_META = 3


class PlaneError(Exception):
    pass


class _Stale:
    """Sentinel returned by read_slot for torn, lapped, or empty slots."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "STALE"


STALE = _Stale()


@dataclass(frozen=True)
class RegionSpec:
    """Creation-time request for one data-type region."""

    data_type: DataType
    slots_per_buffer: int
    slot_payload_bytes: int


@dataclass(frozen=True)
class RegionDescriptor:
    data_type: int
    slots_per_buffer: int
    slot_payload_bytes: int
    ping_offset: int
    pong_offset: int

    @property
    def slot_stride(self) -> int:
        return _slot_stride(self.slot_payload_bytes)


@dataclass(frozen=True)
class SlotRef:
    """Locates one slot record: which buffer and which slot within it."""

    data_type: int
    buffer_index: int
    slot_offset_ttis: int
    payload_bytes: int = 0


def _slot_stride(payload_bytes: int) -> int:
    raw = SLOT_HEADER_SIZE + payload_bytes
    return (raw + SLOT_ALIGN - 1) // SLOT_ALIGN * SLOT_ALIGN


def _untrack(shm: shared_memory.SharedMemory) -> None:
    # Readers must not let the resource tracker unlink the segment when
    # their process exits; only the creating writer owns the name.
    try:
        resource_tracker.unregister(shm._name, "shared_memory")  # noqa: SLF001
    except Exception:
        pass


class PlaneHandle:
    """Handle over a mapped telemetry plane.

    The creating handle is the writer and holds the writer lease; handles
    obtained via open_plane are read-only.
    """

    def __init__(self, shm: shared_memory.SharedMemory, *, owner: bool, writer: bool,
                 lease_token: int = 0):
        self._shm = shm
        self._buf = shm.buf
        self._owner = owner
        self._writer = writer
        self._lease_token = lease_token
        self._closed = False

        magic, version, region_count, tti_period_ns, _lease, _ = struct.unpack_from(
            HEADER_FMT, self._buf, 0)
        if magic != MAGIC:
            raise PlaneError(f"bad magic {magic!r}, not a telemetry plane")
        if version != VERSION:
            raise PlaneError(f"unsupported plane version {version}")
        self.tti_period_ns = tti_period_ns
        self._descriptors: dict[int, RegionDescriptor] = {}
        self._state_offsets: dict[int, int] = {}
        for i in range(region_count):
            d = RegionDescriptor(*struct.unpack_from(DESC_FMT, self._buf, HEADER_SIZE + i * DESC_SIZE))
            self._descriptors[d.data_type] = d
            self._state_offsets[d.data_type] = HEADER_SIZE + region_count * DESC_SIZE + i * STATE_SIZE

    # -- introspection ----------------------------------------------------

    @property
    def name(self) -> str:
        return self._shm.name

    @property
    def is_writer(self) -> bool:
        return self._writer

    @property
    def descriptors(self) -> tuple[RegionDescriptor, ...]:
        return tuple(self._descriptors[k] for k in sorted(self._descriptors))

    def region(self, data_type: int) -> RegionDescriptor:
        try:
            return self._descriptors[int(data_type)]
        except KeyError:
            raise PlaneError(f"no region for data_type {data_type}") from None

    def header_bytes(self) -> bytes:
        """Raw header + descriptor bytes (lease field zeroed), for fidelity checks."""
        n = HEADER_SIZE + len(self._descriptors) * DESC_SIZE
        raw = bytearray(self._buf[:n])
        struct.pack_into("<Q", raw, _LEASE_OFF, 0)
        return bytes(raw)

    def region_state(self, data_type: int) -> tuple[int, int, int, int, int]:
        """(active_buffer, write_slot_index, swap_generation, total_writes, latest_tti)."""
        off = self._state_offset(data_type)
        return struct.unpack_from(STATE_FMT, self._buf, off)

    def _state_offset(self, data_type: int) -> int:
        try:
            return self._state_offsets[int(data_type)]
        except KeyError:
            raise PlaneError(f"no region for data_type {data_type}") from None

    # -- writer path -------------------------------------------------------

    def write_slot(self, data_type: int, tti: int, payload: bytes | bytearray | memoryview) -> SlotRef:
        """Publish one slot record; seqlock-protected, never blocks on readers."""
        if not self._writer:
            raise PlaneError("handle is not the writer (no lease)")
        desc = self.region(data_type)
        payload = memoryview(payload)
        if payload.nbytes > desc.slot_payload_bytes:
            raise PlaneError(
                f"payload of {payload.nbytes} B exceeds slot_payload_bytes "
                f"{desc.slot_payload_bytes}")

        soff = self._state_offset(data_type)
        active, widx, swap_gen, total, _latest = struct.unpack_from(STATE_FMT, self._buf, soff)

        base = (desc.ping_offset if active == 0 else desc.pong_offset) + widx * desc.slot_stride
        seq = struct.unpack_from("<Q", self._buf, base)[0]
        struct.pack_into("<Q", self._buf, base, seq + 1)  # odd: write in progress
        struct.pack_into("<QI", self._buf, base + 8, tti, payload.nbytes)
        self._buf[base + SLOT_HEADER_SIZE:base + SLOT_HEADER_SIZE + payload.nbytes] = payload
        struct.pack_into("<Q", self._buf, base, seq + 2)  # even: stable

        ref = SlotRef(int(data_type), active, widx, payload.nbytes)
        widx += 1
        if widx == desc.slots_per_buffer:
            widx = 0
            active ^= 1
            swap_gen += 1
        struct.pack_into(STATE_FMT, self._buf, soff, active, widx, swap_gen, total + 1, tti)
        return ref

    # -- reader path -------------------------------------------------------

    def read_slot(self, ref: SlotRef, expected_tti: int | None = None):
        """Read one slot; returns (tti, payload) or STALE.

        STALE covers: never-written slot, writer mid-write, sequence changed
        during the copy, or (when expected_tti is given) the writer having
        lapped the slot so it now holds a different TTI.
        """
        desc = self.region(ref.data_type)
        if ref.buffer_index not in (0, 1):
            raise PlaneError(f"buffer_index {ref.buffer_index} out of range")
        if not 0 <= ref.slot_offset_ttis < desc.slots_per_buffer:
            raise PlaneError(
                f"slot_offset_ttis {ref.slot_offset_ttis} out of range for region "
                f"{ref.data_type} ({desc.slots_per_buffer} slots)")
        base = (desc.ping_offset if ref.buffer_index == 0 else desc.pong_offset) \
            + ref.slot_offset_ttis * desc.slot_stride

        seq1 = struct.unpack_from("<Q", self._buf, base)[0]
        if seq1 == 0 or seq1 & 1:
            return STALE
        tti, payload_len = struct.unpack_from("<QI", self._buf, base + 8)
        if payload_len > desc.slot_payload_bytes:
            return STALE  # torn header
        payload = bytes(self._buf[base + SLOT_HEADER_SIZE:base + SLOT_HEADER_SIZE + payload_len])
        seq2 = struct.unpack_from("<Q", self._buf, base)[0]
        if seq1 != seq2:
            return STALE
        if expected_tti is not None and tti != expected_tti:
            return STALE
        return tti, payload

    def latest_ref(self, data_type: int) -> tuple[int, SlotRef] | None:
        """(tti, ref) of the most recent write to the region, or None if empty.

        Read without synchronization against the writer; callers re-validate
        through read_slot(ref, expected_tti=tti).
        """
        desc = self.region(data_type)
        active, widx, _gen, total, latest_tti = self.region_state(data_type)
        if total == 0:
            return None
        if widx == 0:
            buf_idx = active ^ 1
            slot = desc.slots_per_buffer - 1
        else:
            buf_idx = active
            slot = widx - 1
        return latest_tti, SlotRef(int(data_type), buf_idx, slot)

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._writer and self._lease_token:
            try:
                held = struct.unpack_from("<Q", self._buf, _LEASE_OFF)[0]
                if held == self._lease_token:
                    struct.pack_into("<Q", self._buf, _LEASE_OFF, 0)
            except (ValueError, TypeError):
                pass  # segment already torn down
        self._buf = None
        self._shm.close()

    def unlink(self) -> None:
        if not self._owner:
            raise PlaneError("only the creating handle may unlink the plane")
        self._shm.unlink()

    def __enter__(self) -> "PlaneHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def plane_size(regions: list[RegionSpec]) -> int:
    """Total mapped bytes for the given region list."""
    n = len(regions)
    off = HEADER_SIZE + n * (DESC_SIZE + STATE_SIZE)
    off = (off + SLOT_ALIGN - 1) // SLOT_ALIGN * SLOT_ALIGN
    for spec in regions:
        off += 2 * spec.slots_per_buffer * _slot_stride(spec.slot_payload_bytes)
    return off


def create_plane(regions: list[RegionSpec], tti_period_ns: int,
                 name: str | None = None,
                 capacity_cap: int = DEFAULT_CAPACITY_CAP) -> PlaneHandle:
    """Create a named plane and acquire the writer lease.

    Raises PlaneError for an empty config, duplicate data types, capacity
    overflow, or a name collision with an existing segment.
    """
    if not regions:
        raise PlaneError("empty config: at least one region is required")
    if tti_period_ns <= 0:
        raise PlaneError("tti_period_ns must be positive")
    seen = set()
    for spec in regions:
        if spec.slots_per_buffer < 2:
            raise PlaneError(f"slots_per_buffer must be >= 2 (got {spec.slots_per_buffer})")
        if spec.slot_payload_bytes < 1:
            raise PlaneError("slot_payload_bytes must be >= 1")
        if spec.data_type in seen:
            raise PlaneError(f"duplicate region for data_type {spec.data_type}")
        seen.add(spec.data_type)

    total = plane_size(regions)
    if total > capacity_cap:
        raise PlaneError(f"plane of {total} B exceeds capacity cap {capacity_cap} B")

    if name is None:
        name = os.environ.get(PLANE_NAME_ENV, DEFAULT_PLANE_NAME)
    try:
        shm = shared_memory.SharedMemory(name=name, create=True, size=total)
    except FileExistsError:
        raise PlaneError(f"plane name collision: {name!r} already exists") from None

    buf = shm.buf
    buf[:total] = b"\x00" * total
    lease = secrets.randbits(63) | 1
    struct.pack_into(HEADER_FMT, buf, 0, MAGIC, VERSION, len(regions), tti_period_ns, lease, 0)

    n = len(regions)
    data_off = HEADER_SIZE + n * (DESC_SIZE + STATE_SIZE)
    data_off = (data_off + SLOT_ALIGN - 1) // SLOT_ALIGN * SLOT_ALIGN
    for i, spec in enumerate(regions):
        span = spec.slots_per_buffer * _slot_stride(spec.slot_payload_bytes)
        ping, pong = data_off, data_off + span
        struct.pack_into(DESC_FMT, buf, HEADER_SIZE + i * DESC_SIZE,
                         int(spec.data_type), spec.slots_per_buffer,
                         spec.slot_payload_bytes, ping, pong)
        data_off = pong + span
    return PlaneHandle(shm, owner=True, writer=True, lease_token=lease)


def open_plane(name: str | None = None) -> PlaneHandle:
    """Attach read-only to an existing plane by name (env SENSE_PLANE_NAME fallback)."""
    if name is None:
        name = os.environ.get(PLANE_NAME_ENV, DEFAULT_PLANE_NAME)
    try:
        shm = shared_memory.SharedMemory(name=name, create=False)
    except FileNotFoundError:
        raise PlaneError(f"no plane named {name!r}") from None
    _untrack(shm)
    return PlaneHandle(shm, owner=False, writer=False)


def attach_writer(name: str | None = None, *, force: bool = False) -> PlaneHandle:
    """Attach to an existing plane as its writer.

    Fails if the lease is already held, unless force=True (recovery after a
    crashed writer). The check-and-set is not atomic across processes; the
    lease is a guard against configuration mistakes, not an arbiter for
    racing writers.
    """
    if name is None:
        name = os.environ.get(PLANE_NAME_ENV, DEFAULT_PLANE_NAME)
    try:
        shm = shared_memory.SharedMemory(name=name, create=False)
    except FileNotFoundError:
        raise PlaneError(f"no plane named {name!r}") from None
    _untrack(shm)
    held = struct.unpack_from("<Q", shm.buf, _LEASE_OFF)[0]
    if held != 0 and not force:
        shm.close()
        raise PlaneError("writer lease already held; one writer per plane")
    lease = secrets.randbits(63) | 1
    struct.pack_into("<Q", shm.buf, _LEASE_OFF, lease)
    return PlaneHandle(shm, owner=False, writer=True, lease_token=lease)
