"""
Binary framing for robot <-> edge traffic

Layout (little-endian):
    header  magic u16 | version u8 | kind u8 | seq u32 | timestamp_us u64 | payload_len u16
    payload kind-specific
    trailer CRC-32 over header + payload
"""
import asyncio
import struct
import zlib
from typing import Optional

from edgebot.core.errors import (
    BadMagic,
    BadVersion,
    CorruptFrame,
    FrameTooLarge,
    ProtocolError,
    Truncated,
    UnknownKind,
)
from edgebot.models.frames import (
    CommandPayload,
    Frame,
    FrameKind,
    HeartbeatPayload,
    ImuBatch,
    ImuSample,
    RttPayload,
)

MAGIC = 0xED6E
VERSION = 1

HEADER = struct.Struct("<HBBIQH")
TRAILER = struct.Struct("<I")
HEADER_SIZE = HEADER.size  # 18
TRAILER_SIZE = TRAILER.size  # 4
MIN_FRAME_SIZE = HEADER_SIZE + TRAILER_SIZE
MAX_PAYLOAD = 0xFFFF

_IMU_COUNT = struct.Struct("<H")
_IMU_SAMPLE = struct.Struct("<Iii")
_RTT = struct.Struct("<BI")
_COMMAND = struct.Struct("<iiH")


def crc32(data: bytes) -> int:
    """Standard CRC-32: init 0xFFFFFFFF, reflected polynomial 0xEDB88320, final XOR 0xFFFFFFFF"""
    return zlib.crc32(data) & 0xFFFFFFFF


def _encode_payload(frame: Frame) -> bytes:
    p = frame.payload
    if isinstance(p, ImuBatch):
        if p.count < 1:
            raise ProtocolError("ImuBatch needs at least one sample")
        if _IMU_COUNT.size + p.count * _IMU_SAMPLE.size > MAX_PAYLOAD:
            raise FrameTooLarge(f"ImuBatch of {p.count} samples exceeds {MAX_PAYLOAD} payload bytes")
        parts = [_IMU_COUNT.pack(p.count)]
        parts.extend(_IMU_SAMPLE.pack(s.dt_us, s.dd_mm, s.dtheta_urad) for s in p.samples)
        return b"".join(parts)
    if isinstance(p, RttPayload):
        return _RTT.pack(p.ap_id, p.range_mm)
    if isinstance(p, CommandPayload):
        return _COMMAND.pack(p.v_mmps, p.omega_urad_ps, p.duration_ms)
    if isinstance(p, HeartbeatPayload):
        return b""
    raise ProtocolError(f"cannot encode payload of type {type(p).__name__}")


def encode_frame(frame: Frame) -> bytes:
    """
    Serialize a frame to its wire bytes

    Raises:
        FrameTooLarge: payload longer than 65535 bytes
        ProtocolError: a field does not fit its wire type
    """
    try:
        payload = _encode_payload(frame)
        header = HEADER.pack(MAGIC, VERSION, int(frame.kind), frame.seq, frame.timestamp_us, len(payload))
    except struct.error as e:
        raise ProtocolError(f"field out of range in {frame.kind.name} frame: {e}") from e
    body = header + payload
    return body + TRAILER.pack(crc32(body))


def _decode_payload(kind: FrameKind, payload: bytes):
    n = len(payload)
    if kind is FrameKind.IMU_BATCH:
        if n < _IMU_COUNT.size:
            raise CorruptFrame("ImuBatch payload shorter than its count field")
        (count,) = _IMU_COUNT.unpack_from(payload, 0)
        if count < 1 or n != _IMU_COUNT.size + count * _IMU_SAMPLE.size:
            raise CorruptFrame(f"ImuBatch count {count} inconsistent with {n} payload bytes")
        samples = tuple(
            ImuSample(*fields)
            for fields in _IMU_SAMPLE.iter_unpack(payload[_IMU_COUNT.size:])
        )
        return ImuBatch(samples)
    if kind is FrameKind.RTT:
        if n != _RTT.size:
            raise CorruptFrame(f"Rtt payload must be {_RTT.size} bytes, got {n}")
        return RttPayload(*_RTT.unpack(payload))
    if kind is FrameKind.COMMAND:
        if n != _COMMAND.size:
            raise CorruptFrame(f"Command payload must be {_COMMAND.size} bytes, got {n}")
        return CommandPayload(*_COMMAND.unpack(payload))
    if n != 0:
        raise CorruptFrame(f"Heartbeat payload must be empty, got {n} bytes")
    return HeartbeatPayload()


def decode_frame(data: bytes) -> Frame:
    """
    Parse one complete frame

    Checks run in a fixed order so each failure maps to one error type:
    length, CRC, magic, version, kind, then payload shape.
    """
    data = bytes(data)
    if len(data) < MIN_FRAME_SIZE:
        raise Truncated(f"frame needs at least {MIN_FRAME_SIZE} bytes, got {len(data)}")

    body, trailer = data[:-TRAILER_SIZE], data[-TRAILER_SIZE:]
    (expected,) = TRAILER.unpack(trailer)
    actual = crc32(body)
    if actual != expected:
        raise CorruptFrame(f"CRC mismatch: computed {actual:#010x}, trailer {expected:#010x}")

    magic, version, kind, seq, timestamp_us, payload_len = HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic:#06x}")
    if version != VERSION:
        raise BadVersion(f"unsupported protocol version {version}")
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise UnknownKind(f"unknown frame kind {kind}") from None

    payload = body[HEADER_SIZE:]
    if len(payload) != payload_len:
        raise CorruptFrame(f"declared payload_len {payload_len} but frame carries {len(payload)} bytes")

    return Frame(seq=seq, timestamp_us=timestamp_us, payload=_decode_payload(kind, payload))


async def read_frame_bytes(reader: asyncio.StreamReader) -> Optional[bytes]:
    """
    Read one frame's bytes from a stream, using the header's payload_len

    Returns:
        The raw frame, or None on a clean EOF between frames

    Raises:
        Truncated: EOF inside a frame
    """
    try:
        header = await reader.readexactly(HEADER_SIZE)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise Truncated(f"stream ended after {len(e.partial)} header bytes") from None

    (payload_len,) = struct.unpack_from("<H", header, HEADER_SIZE - 2)
    try:
        rest = await reader.readexactly(payload_len + TRAILER_SIZE)
    except asyncio.IncompleteReadError as e:
        raise Truncated(
            f"stream ended {payload_len + TRAILER_SIZE - len(e.partial)} bytes short of a frame"
        ) from None
    return header + rest
