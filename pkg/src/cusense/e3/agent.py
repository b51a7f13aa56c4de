"""E3 agent: serves setup/subscription/indication/control over a telemetry plane.

One acceptor thread plus one session per connected manager. Each session runs
two threads: a socket reader handling requests, and a sender draining that
session's TTI event queue into Indication messages. Sessions never touch the
plane writer; they only translate write notifications into slot references.

TTI events reach the agent either in-process (the plane writer calls
notify_write after each write_slot) or through a polling thread watching the
plane's region state (cross-process deployments; may skip TTIs under load).
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass

from cusense.e3.endpoints import FramedSocket, bind_listener
from cusense.e3.wire import (
    ControlAck,
    ControlRequest,
    E3DecodeError,
    Indication,
    SetupRequest,
    SetupResponse,
    Status,
    SubscriptionRequest,
    SubscriptionResponse,
    WireSlotRef,
)
from cusense.plane import PlaneHandle, SlotRef

log = logging.getLogger(__name__)

DEFAULT_FUNCTIONS = ((1, "DU-Low-telemetry"),)


@dataclass
class _Subscription:
    sub_id: int
    data_type: int
    period_ttis: int
    duration_ttis: int
    anchor_tti: int | None = None
    sent: int = 0
    done: bool = False


@dataclass
class _TtiEvent:
    data_type: int
    tti: int
    ref: SlotRef


class _Session:
    def __init__(self, agent: "E3Agent", framed: FramedSocket, session_id: int):
        self.agent = agent
        self.framed = framed
        self.session_id = session_id
        self.subs: dict[int, _Subscription] = {}
        self.lock = threading.Lock()
        self.events: deque[_TtiEvent] = deque()
        self.events_ready = threading.Condition(self.lock)
        self.dropped = 0
        self.setup_done = False
        self.closing = False

    # -- socket reader -------------------------------------------------------

    def run_reader(self) -> None:
        try:
            while True:
                msg = self.framed.recv()
                if msg is None:
                    break
                self._handle(msg)
        except (E3DecodeError, OSError) as e:
            log.debug("session %d reader stopped: %s", self.session_id, e)
        finally:
            self.close()

    def _handle(self, msg) -> None:
        if isinstance(msg, SetupRequest):
            self.framed.send(SetupResponse(self.agent.agent_id, self.agent.functions))
            self.setup_done = True
            return
        if not self.setup_done:
            raise E3DecodeError("protocol violation: message before setup")
        if isinstance(msg, SubscriptionRequest):
            with self.lock:
                if msg.sub_id in self.subs:
                    status = Status.REJECTED
                else:
                    self.subs[msg.sub_id] = _Subscription(
                        msg.sub_id, msg.data_type, msg.period_ttis, msg.duration_ttis)
                    status = Status.OK
            self.framed.send(SubscriptionResponse(msg.sub_id, status))
        elif isinstance(msg, ControlRequest):
            status = Status.OK
            if self.agent.control_hook is not None:
                try:
                    self.agent.control_hook(msg.action_code, msg.payload)
                except Exception:
                    log.exception("control hook failed")
                    status = Status.ERROR
            self.framed.send(ControlAck(msg.ctrl_id, status))
        else:
            raise E3DecodeError(f"unexpected message at agent: {type(msg).__name__}")

    # -- indication sender -----------------------------------------------------

    def run_sender(self) -> None:
        try:
            while True:
                with self.lock:
                    while not self.events and not self.closing:
                        self.events_ready.wait(timeout=0.5)
                    if self.closing and not self.events:
                        return
                    event = self.events.popleft()
                    due = self._due_subs(event)
                for sub_id in due:
                    self.framed.send(Indication(
                        sub_id, event.tti,
                        WireSlotRef(event.ref.data_type, event.ref.buffer_index,
                                    event.ref.slot_offset_ttis, event.ref.payload_bytes)))
        except OSError as e:
            log.debug("session %d sender stopped: %s", self.session_id, e)
            self.close()

    def _due_subs(self, event: _TtiEvent) -> list[int]:
        due = []
        for sub in self.subs.values():
            if sub.done or sub.data_type != event.data_type:
                continue
            if sub.anchor_tti is None:
                sub.anchor_tti = event.tti
            elapsed = event.tti - sub.anchor_tti
            if elapsed < 0:
                continue
            if sub.duration_ttis and elapsed >= sub.duration_ttis:
                sub.done = True
                continue
            if elapsed % sub.period_ttis == 0:
                sub.sent += 1
                due.append(sub.sub_id)
        return due

    def offer(self, event: _TtiEvent) -> None:
        with self.lock:
            if self.closing:
                return
            if self.agent.queue_slots and len(self.events) >= self.agent.queue_slots:
                self.events.popleft()
                self.dropped += 1  # slow consumer: shed oldest, never block writer
            self.events.append(event)
            self.events_ready.notify()

    def close(self) -> None:
        with self.lock:
            if self.closing:
                return
            self.closing = True
            self.events_ready.notify_all()
        self.framed.close()
        self.agent._forget(self)


class E3Agent:
    """Accepts E3 managers and streams slot references for subscribed data."""

    def __init__(self, plane: PlaneHandle, endpoint: str, *,
                 agent_id: int = 1,
                 functions: tuple[tuple[int, str], ...] = DEFAULT_FUNCTIONS,
                 control_hook=None,
                 queue_slots: int | None = 4096):
        self.plane = plane
        self.endpoint = endpoint
        self.agent_id = agent_id
        self.functions = functions
        self.control_hook = control_hook
        self.queue_slots = queue_slots
        self._sessions: list[_Session] = []
        self._sessions_lock = threading.Lock()
        self._session_ids = itertools.count(1)
        self._listener = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._poller: threading.Thread | None = None
        self._poll_state: dict[int, int] = {}

    def start(self) -> "E3Agent":
        self._listener = bind_listener(self.endpoint)
        t = threading.Thread(target=self._accept_loop, name="e3-agent-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            session = _Session(self, FramedSocket(sock), next(self._session_ids))
            with self._sessions_lock:
                self._sessions.append(session)
            for target, tag in ((session.run_reader, "rx"), (session.run_sender, "tx")):
                t = threading.Thread(target=target,
                                     name=f"e3-session-{session.session_id}-{tag}",
                                     daemon=True)
                t.start()
                self._threads.append(t)

    def notify_write(self, data_type: int, tti: int, ref: SlotRef) -> None:
        """In-process TTI signal from the plane writer, once per write_slot."""
        event = _TtiEvent(int(data_type), tti, ref)
        with self._sessions_lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.offer(event)

    def start_polling(self, interval_s: float = 0.0002) -> None:
        """Watch the plane's region state for new writes (cross-process mode)."""
        def poll() -> None:
            while not self._stop.is_set():
                for desc in self.plane.descriptors:
                    latest = self.plane.latest_ref(desc.data_type)
                    if latest is None:
                        continue
                    tti, ref = latest
                    if self._poll_state.get(desc.data_type) != tti:
                        self._poll_state[desc.data_type] = tti
                        self.notify_write(desc.data_type, tti, ref)
                self._stop.wait(interval_s)

        self._poller = threading.Thread(target=poll, name="e3-agent-poll", daemon=True)
        self._poller.start()

    @property
    def dropped_indications(self) -> int:
        with self._sessions_lock:
            return sum(s.dropped for s in self._sessions)

    def _forget(self, session: _Session) -> None:
        with self._sessions_lock:
            if session in self._sessions:
                self._sessions.remove(session)

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(2)  # wake a blocked accept()
            except OSError:
                pass
            self._listener.close()
        with self._sessions_lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.close()
        for t in self._threads:
            t.join(timeout=2)

    def __enter__(self) -> "E3Agent":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
