"""Endpoint parsing and framed-socket helpers shared by agent and manager.

Endpoints are strings: "unix:/path/to.sock" or "tcp:host:port". A bare path
is treated as a unix socket path.
"""

from __future__ import annotations

import os
import socket
import struct
import threading

from cusense.e3.wire import E3DecodeError, E3Message, decode_frame, encode


def parse_endpoint(endpoint: str) -> tuple[int, str | tuple[str, int]]:
    if endpoint.startswith("unix:"):
        return socket.AF_UNIX, endpoint[5:]
    if endpoint.startswith("tcp:"):
        host, _, port = endpoint[4:].rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp endpoint {endpoint!r}, want tcp:host:port")
        return socket.AF_INET, (host, int(port))
    return socket.AF_UNIX, endpoint


def bind_listener(endpoint: str, backlog: int = 8) -> socket.socket:
    family, addr = parse_endpoint(endpoint)
    if family == socket.AF_UNIX and isinstance(addr, str) and os.path.exists(addr):
        os.unlink(addr)
    sock = socket.socket(family, socket.SOCK_STREAM)
    if family == socket.AF_INET:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(addr)
    sock.listen(backlog)
    return sock


def connect_endpoint(endpoint: str, timeout: float) -> socket.socket:
    family, addr = parse_endpoint(endpoint)
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.settimeout(timeout)
    sock.connect(addr)
    return sock


class FramedSocket:
    """Length-framed E3 messages over a stream socket; sends are serialized."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rxbuf = bytearray()
        self._send_lock = threading.Lock()

    def send(self, msg: E3Message) -> None:
        data = encode(msg)
        with self._send_lock:
            self.sock.sendall(data)

    def recv(self) -> E3Message | None:
        """Next message, or None once the peer closed cleanly."""
        while True:
            msg, consumed = decode_frame(self._rxbuf)
            if msg is not None:
                del self._rxbuf[:consumed]
                return msg
            if len(self._rxbuf) >= 4:
                # Complete header; pull the rest of the frame in one read.
                (length,) = struct.unpack_from("<I", self._rxbuf, 0)
                want = max(4 + min(length, 1 << 24) - len(self._rxbuf), 1)
            else:
                want = 4 - len(self._rxbuf)
            chunk = self.sock.recv(max(want, 4096))
            if not chunk:
                if self._rxbuf:
                    raise E3DecodeError("connection closed mid-frame")
                return None
            self._rxbuf.extend(chunk)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
