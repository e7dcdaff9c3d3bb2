from dataclasses import dataclass
from enum import IntEnum
import struct

import msgpack


class DecisionReason(IntEnum):
    ADMITTED = 1
    ALREADY_ADMITTED = 2
    RANDOMIZED_REJECT = 3
    NOT_BEST = 4


class WindowMessage:

    def __init__(self, message_type: int):
        self.message_type = message_type

    def to_bytes(self) -> bytes:
        pass

    @staticmethod
    def from_bytes(data: bytes) -> "WindowMessage":
        pass


class LoadBroadcastMessage(WindowMessage):
    """TP -> users: current load, plus the log term users need when alpha = 1."""
    tp: int
    psi: float
    logterm: float

    def __init__(self, tp: int = 0, psi: float = 0.0, logterm: float = 0.0):
        super().__init__(1)
        self.tp = tp
        self.psi = psi
        self.logterm = logterm

    def to_bytes(self) -> bytes:
        return msgpack.packb({"tp": self.tp, "psi": self.psi, "logterm": self.logterm}, use_bin_type=True)

    @staticmethod
    def from_bytes(data: bytes) -> WindowMessage:
        state = msgpack.unpackb(data, raw=False)
        return LoadBroadcastMessage(state["tp"], state["psi"], state["logterm"])


@dataclass
class RequestPayload:
    struct_format = "<IIddd"

    user: int
    tp: int
    theta: float
    logterm: float
    change: float


class AssociationRequestMessage(WindowMessage):
    """User -> TP: join (or migrate to) the TP, carrying the user's gain and expected change."""
    payload: RequestPayload

    def __init__(self, payload: RequestPayload | None = None):
        super().__init__(2)
        self.payload = payload

    def to_bytes(self) -> bytes:
        p = self.payload
        return struct.pack(RequestPayload.struct_format, p.user, p.tp, p.theta, p.logterm, p.change)

    @staticmethod
    def from_bytes(data: bytes) -> WindowMessage:
        return AssociationRequestMessage(RequestPayload(*struct.unpack_from(RequestPayload.struct_format, data)))


class DecisionMessage(WindowMessage):
    struct_format = "<IIBB"

    def __init__(self, tp: int = 0, user: int = 0, accepted: bool = False,
                 reason: DecisionReason = DecisionReason.ADMITTED):
        super().__init__(3)
        self.tp = tp
        self.user = user
        self.accepted = accepted
        self.reason = reason

    def to_bytes(self) -> bytes:
        return struct.pack(DecisionMessage.struct_format, self.tp, self.user, int(self.accepted), self.reason)

    @staticmethod
    def from_bytes(data: bytes) -> WindowMessage:
        tp, user, accepted, reason = struct.unpack_from(DecisionMessage.struct_format, data)
        return DecisionMessage(tp, user, bool(accepted), DecisionReason(reason))


_MESSAGE_TYPES: dict[int, type[WindowMessage]] = {
    1: LoadBroadcastMessage,
    2: AssociationRequestMessage,
    3: DecisionMessage,
}


def encode_message(message: WindowMessage) -> bytes:
    return struct.pack("<B", message.message_type) + message.to_bytes()


def parse_message(data: bytes) -> WindowMessage:
    message_type, = struct.unpack_from("<B", data)
    if message_type not in _MESSAGE_TYPES:
        raise ValueError(f"unknown window message type {message_type}")
    return _MESSAGE_TYPES[message_type].from_bytes(data[1:])
