from cusense.e3.wire import (  # noqa: F401
    ControlAck,
    ControlRequest,
    E3DecodeError,
    E3Message,
    Indication,
    SetupRequest,
    SetupResponse,
    Status,
    SubscriptionRequest,
    SubscriptionResponse,
    decode,
    encode,
)
from cusense.e3.agent import E3Agent  # noqa: F401
from cusense.e3.manager import E3Manager, E3TimeoutError  # noqa: F401
