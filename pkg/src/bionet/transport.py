"""Transports carrying wire frames between nodes.

Two interchangeable implementations:

- TcpTransport: real sockets, one request/response pair per connection round
  trip (connections persist; a client may send further requests on the same
  socket).
- LoopbackTransport: an in-process registry mapping addresses to frame
  handlers; requests are synchronous direct calls, which is what makes
  single-driver simulations deterministic.

A node is just a callable `handler(frame_bytes) -> response bytes | None`;
returning None drops the request without a response (the caller sees a
transport error), used for silently discarding unauthenticated traffic.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from typing import Callable, Optional

from .errors import FrameTooLarge, TransportError

FrameHandler = Callable[[bytes], Optional[bytes]]

_MAX_FRAME = (1 << 20) + 4


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame_bytes(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame; rejects oversize before buffering."""
    head = _recv_exact(sock, 4)
    length = struct.unpack(">I", head)[0]
    if length + 4 > _MAX_FRAME:
        raise FrameTooLarge(f"declared length {length}")
    return head + _recv_exact(sock, length)


class LoopbackTransport:
    def __init__(self):
        self._handlers: dict[str, FrameHandler] = {}
        self._lock = threading.Lock()

    def listen(self, address: str, handler: FrameHandler) -> None:
        with self._lock:
            if address in self._handlers:
                raise TransportError(f"address {address} already bound")
            self._handlers[address] = handler

    def request(self, address: str, frame_bytes: bytes, timeout: float = 5.0) -> bytes:
        with self._lock:
            handler = self._handlers.get(address)
        if handler is None:
            raise TransportError(f"no listener at {address}")
        response = handler(frame_bytes)
        if response is None:
            raise TransportError(f"{address} dropped the request")
        return response

    def close(self) -> None:
        with self._lock:
            self._handlers.clear()


class _TcpRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        handler: FrameHandler = self.server.frame_handler  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                frame = recv_frame_bytes(sock)
            except (ConnectionError, OSError):
                return
            response = handler(frame)
            if response is None:
                return  # drop: close without replying
            try:
                sock.sendall(response)
            except OSError:
                return


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TcpTransport:
    def __init__(self):
        self._servers: list[_TcpServer] = []

    @staticmethod
    def _split(address: str) -> tuple[str, int]:
        host, _, port = address.rpartition(":")
        return host or "127.0.0.1", int(port)

    def listen(self, address: str, handler: FrameHandler) -> None:
        server = _TcpServer(self._split(address), _TcpRequestHandler)
        server.frame_handler = handler  # type: ignore[attr-defined]
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        self._servers.append(server)

    def request(self, address: str, frame_bytes: bytes, timeout: float = 5.0) -> bytes:
        try:
            with socket.create_connection(self._split(address), timeout=timeout) as sock:
                sock.sendall(frame_bytes)
                return recv_frame_bytes(sock)
        except (OSError, ConnectionError) as exc:
            raise TransportError(f"request to {address} failed: {exc}") from exc

    def close(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()


def free_tcp_ports(n: int) -> list[int]:
    """Reserve n currently-free localhost ports (best effort)."""
    socks, ports = [], []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return ports
