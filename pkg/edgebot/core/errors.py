"""
Exception hierarchy shared by every edgebot service
"""
from typing import Any, Optional


class EdgebotError(Exception):
    """Base class for all edgebot errors"""


class GeometryError(EdgebotError, ValueError):
    """Non-finite or otherwise invalid geometric input"""


class ScenarioError(EdgebotError, ValueError):
    """Scenario configuration violates its invariants"""


class ProtocolError(EdgebotError, ValueError):
    """Base class for wire decoding/encoding failures"""


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class CorruptFrame(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class TransportError(EdgebotError):
    """The byte stream between robot and edge failed"""


class RobotSessionAborted(EdgebotError):
    """Robot session stopped early; `stats` holds the counters reached so far"""

    def __init__(self, message: str, stats: Any = None):
        super().__init__(message)
        self.stats = stats


class DuplicateFrame(EdgebotError):
    """Frame sequence number did not advance"""

    def __init__(self, kind: Any, seq: int, last_seq: int):
        super().__init__(f"duplicate {kind} frame seq={seq} (last={last_seq})")
        self.kind = kind
        self.seq = seq
        self.last_seq = last_seq


class PlannerError(EdgebotError, ValueError):
    """No waypoint left to plan toward"""


class SolverDiverged(EdgebotError):
    """Levenberg-Marquardt damping exceeded its ceiling"""

    def __init__(self, message: str, stats: Optional[Any] = None):
        super().__init__(message)
        self.stats = stats


class MetricsError(EdgebotError, ValueError):
    """Metric undefined for the given series"""
