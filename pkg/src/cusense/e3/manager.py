"""E3 manager: dApp-side endpoint for one agent connection.

A single receive-loop thread routes setup/subscription/control replies to
their waiting callers and queues indications for consumption in arrival
order. Subscriptions and control requests may be issued from any thread.
"""

from __future__ import annotations

import itertools
import queue
import socket
import threading

from cusense.e3.endpoints import FramedSocket, connect_endpoint
from cusense.e3.wire import (
    ControlAck,
    ControlRequest,
    E3DecodeError,
    Indication,
    SetupRequest,
    SetupResponse,
    SubscriptionRequest,
    SubscriptionResponse,
)

DEFAULT_TIMEOUT_S = 2.0


class E3TimeoutError(Exception):
    pass


class E3ProtocolError(Exception):
    pass


class E3Manager:
    """Client handle over one agent connection (setup handshake completed)."""

    def __init__(self, framed: FramedSocket, setup: SetupResponse, manager_id: int):
        self.framed = framed
        self.manager_id = manager_id
        self.agent_id = setup.agent_id
        self.functions = setup.functions
        self._indications: queue.Queue[Indication] = queue.Queue()
        self._pending: dict[tuple[str, int], queue.Queue] = {}
        self._pending_lock = threading.Lock()
        self._sub_ids = itertools.count(1)
        self._ctrl_ids = itertools.count(1)
        self._closed = threading.Event()
        self._rx = threading.Thread(target=self._recv_loop, name="e3-manager-rx", daemon=True)
        self._rx.start()

    # -- connection -----------------------------------------------------------

    @classmethod
    def connect(cls, endpoint: str, *, manager_id: int = 1,
                timeout: float = DEFAULT_TIMEOUT_S) -> "E3Manager":
        """Dial the agent and run the setup handshake (timeout in seconds)."""
        try:
            sock = connect_endpoint(endpoint, timeout)
        except (OSError, socket.timeout) as e:
            raise E3TimeoutError(f"cannot reach agent at {endpoint!r}: {e}") from None
        framed = FramedSocket(sock)
        framed.send(SetupRequest(manager_id))
        try:
            reply = framed.recv()
        except (socket.timeout, TimeoutError):
            framed.close()
            raise E3TimeoutError(f"setup handshake timed out after {timeout}s") from None
        if not isinstance(reply, SetupResponse):
            framed.close()
            raise E3ProtocolError(f"expected SetupResponse, got {type(reply).__name__}")
        sock.settimeout(None)
        return cls(framed, reply, manager_id)

    def _recv_loop(self) -> None:
        try:
            while True:
                msg = self.framed.recv()
                if msg is None:
                    break
                if isinstance(msg, Indication):
                    self._indications.put(msg)
                elif isinstance(msg, SubscriptionResponse):
                    self._resolve(("sub", msg.sub_id), msg)
                elif isinstance(msg, ControlAck):
                    self._resolve(("ctrl", msg.ctrl_id), msg)
                else:
                    raise E3DecodeError(f"unexpected message at manager: {type(msg).__name__}")
        except (E3DecodeError, OSError):
            pass
        finally:
            self._closed.set()
            self._indications.put(None)  # wake blocked consumers

    def _resolve(self, key: tuple[str, int], msg) -> None:
        with self._pending_lock:
            waiter = self._pending.pop(key, None)
        if waiter is not None:
            waiter.put(msg)

    def _rpc(self, key: tuple[str, int], msg, timeout: float):
        waiter: queue.Queue = queue.Queue(maxsize=1)
        with self._pending_lock:
            self._pending[key] = waiter
        self.framed.send(msg)
        try:
            return waiter.get(timeout=timeout)
        except queue.Empty:
            with self._pending_lock:
                self._pending.pop(key, None)
            raise E3TimeoutError(f"no reply to {key[0]} request {key[1]}") from None

    # -- procedures -------------------------------------------------------------

    def subscribe(self, data_type: int, period_ttis: int, duration_ttis: int = 0,
                  sub_id: int | None = None,
                  timeout: float = DEFAULT_TIMEOUT_S) -> SubscriptionResponse:
        if sub_id is None:
            sub_id = next(self._sub_ids)
        req = SubscriptionRequest(sub_id, int(data_type), period_ttis, duration_ttis)
        return self._rpc(("sub", sub_id), req, timeout)

    def send_control(self, action_code: int, payload: bytes = b"",
                     timeout: float = DEFAULT_TIMEOUT_S) -> ControlAck:
        ctrl_id = next(self._ctrl_ids)
        req = ControlRequest(ctrl_id, action_code, payload)
        return self._rpc(("ctrl", ctrl_id), req, timeout)

    def recv(self, timeout: float | None = None) -> Indication | None:
        """Next indication in arrival order; None once the connection is gone."""
        if self._closed.is_set() and self._indications.empty():
            return None
        try:
            msg = self._indications.get(timeout=timeout)
        except queue.Empty:
            return None
        return msg

    def indications(self, timeout: float | None = None):
        """Iterate indications until the connection closes or one recv times out."""
        while True:
            ind = self.recv(timeout=timeout)
            if ind is None:
                return
            yield ind

    @property
    def connected(self) -> bool:
        return not self._closed.is_set()

    def close(self) -> None:
        self.framed.close()
        self._closed.set()

    def __enter__(self) -> "E3Manager":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
