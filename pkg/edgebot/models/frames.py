"""
Wire frame value types

Payload fields hold the integer wire units (mm, µrad, µs, ms); the helpers
convert to and from SI values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Tuple, Union

MM_PER_M = 1000
URAD_PER_RAD = 1_000_000


class FrameKind(IntEnum):
    IMU_BATCH = 1
    RTT = 2
    COMMAND = 3
    HEARTBEAT = 4


def to_fixed(value: float, scale: int) -> int:
    """Round a real value to the nearest wire quantum (half away from zero)"""
    scaled = value * scale
    return int(math.copysign(math.floor(abs(scaled) + 0.5), scaled))


def from_fixed(value: int, scale: int) -> float:
    return value / scale


@dataclass(frozen=True, slots=True)
class ImuSample:
    dt_us: int
    dd_mm: int
    dtheta_urad: int

    @classmethod
    def from_real(cls, dt_us: int, dd: float, dtheta: float) -> "ImuSample":
        return cls(int(dt_us), to_fixed(dd, MM_PER_M), to_fixed(dtheta, URAD_PER_RAD))

    @property
    def dd(self) -> float:
        return from_fixed(self.dd_mm, MM_PER_M)

    @property
    def dtheta(self) -> float:
        return from_fixed(self.dtheta_urad, URAD_PER_RAD)


@dataclass(frozen=True, slots=True)
class ImuBatch:
    samples: Tuple[ImuSample, ...]
    kind: FrameKind = field(default=FrameKind.IMU_BATCH, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def count(self) -> int:
        return len(self.samples)


@dataclass(frozen=True, slots=True)
class RttPayload:
    ap_id: int
    range_mm: int
    kind: FrameKind = field(default=FrameKind.RTT, init=False, repr=False)

    @classmethod
    def from_real(cls, ap_id: int, range_m: float) -> "RttPayload":
        return cls(int(ap_id), to_fixed(max(range_m, 0.0), MM_PER_M))

    @property
    def range(self) -> float:
        return from_fixed(self.range_mm, MM_PER_M)


@dataclass(frozen=True, slots=True)
class CommandPayload:
    v_mmps: int
    omega_urad_ps: int
    duration_ms: int
    kind: FrameKind = field(default=FrameKind.COMMAND, init=False, repr=False)

    @classmethod
    def from_real(cls, v: float, omega: float, duration_ms: int) -> "CommandPayload":
        return cls(to_fixed(v, MM_PER_M), to_fixed(omega, URAD_PER_RAD), int(duration_ms))

    @property
    def v(self) -> float:
        return from_fixed(self.v_mmps, MM_PER_M)

    @property
    def omega(self) -> float:
        return from_fixed(self.omega_urad_ps, URAD_PER_RAD)


@dataclass(frozen=True, slots=True)
class HeartbeatPayload:
    kind: FrameKind = field(default=FrameKind.HEARTBEAT, init=False, repr=False)


Payload = Union[ImuBatch, RttPayload, CommandPayload, HeartbeatPayload]


@dataclass(frozen=True, slots=True)
class Frame:
    seq: int
    timestamp_us: int
    payload: Payload

    @property
    def kind(self) -> FrameKind:
        return self.payload.kind
