from typing import Any, Literal

from pydantic import BaseModel, ConfigDict


class HydraError(Exception):
    """Base class for every error raised by the simulator."""


class Message(BaseModel):
    """Payload carried by the simulated transport. Subclasses pin `kind`."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: str


class Ack(Message):
    kind: Literal["ACK"] = "ACK"
    detail: dict[str, Any] | None = None


class ErrorReply(Message):
    kind: Literal["ERROR"] = "ERROR"
    reason: str


class Heartbeat(Message):
    kind: Literal["HEARTBEAT"] = "HEARTBEAT"


class HeartbeatAck(Message):
    kind: Literal["HEARTBEAT_ACK"] = "HEARTBEAT_ACK"


class MetricRecord(BaseModel):
    time: int
    node: int | None
    metric: str
    value: float | int | str | bool | dict[str, Any] | None


class DeviceProfile(BaseModel):
    """Per-peer compute model: ms per single-sample step and memory in samples."""

    compute_ms: float
    memory: int


class ProfileRequest(Message):
    kind: Literal["PROFILE"] = "PROFILE"


class ProfileReply(Message):
    kind: Literal["PROFILE_REPLY"] = "PROFILE_REPLY"
    profile: DeviceProfile
    peer_id: int | None
