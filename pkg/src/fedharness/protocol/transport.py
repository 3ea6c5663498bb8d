"""Framed message connections over TCP sockets or in-memory queues.

Both transports move real encoded frames, so byte counters and decoding
behave identically in simulation and over the network.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from typing import Optional

from ..monitor import NetCounter
from .messages import FRAME_HEADER, MAX_FRAME, Message, ProtocolError, decode, frame


class ConnectionClosed(Exception):
    pass


class Connection:
    counter: NetCounter

    def send(self, msg: Message) -> int:
        raise NotImplementedError

    def recv(self, timeout: Optional[float] = None) -> Message:
        """Next message; ``TimeoutError`` on timeout, ``ConnectionClosed`` at EOF."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SocketConnection(Connection):
    def __init__(self, sock: socket.socket, counter: Optional[NetCounter] = None):
        self.sock = sock
        self.counter = counter or NetCounter()
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, counter: Optional[NetCounter] = None,
                timeout: float = 5.0) -> SocketConnection:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, counter)

    def send(self, msg: Message) -> int:
        data = frame(msg)
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
        self.counter.add_out(len(data))
        return len(data)

    def _fill(self, n: int, deadline: Optional[float]) -> None:
        while len(self._buf) < n:
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError("recv timed out")
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buf)))
            except socket.timeout:
                raise TimeoutError("recv timed out") from None
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            self._buf += chunk

    def recv(self, timeout: Optional[float] = None) -> Message:
        deadline = None if timeout is None else time.monotonic() + timeout
        self._fill(FRAME_HEADER.size, deadline)
        (n,) = FRAME_HEADER.unpack_from(self._buf, 0)
        if n > MAX_FRAME:
            raise ProtocolError(f"frame of {n} bytes exceeds limit")
        total = FRAME_HEADER.size + n
        self._fill(total, deadline)
        payload = bytes(self._buf[FRAME_HEADER.size : total])
        del self._buf[:total]
        self.counter.add_in(total)
        return decode(payload)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


_EOF = object()


class QueueConnection(Connection):
    """One end of an in-memory duplex pipe; see :func:`pipe`."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, counter: Optional[NetCounter] = None):
        self._inbox = inbox
        self._outbox = outbox
        self.counter = counter or NetCounter()
        self._closed = False

    def send(self, msg: Message) -> int:
        if self._closed:
            raise ConnectionClosed("connection closed")
        data = frame(msg)
        self._outbox.put(data)
        self.counter.add_out(len(data))
        return len(data)

    def send_raw(self, data: bytes) -> None:
        self._outbox.put(data)

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("recv timed out") from None
        if data is _EOF:
            self._inbox.put(_EOF)
            raise ConnectionClosed("peer closed the connection")
        self.counter.add_in(len(data))
        (n,) = FRAME_HEADER.unpack_from(data, 0)
        if FRAME_HEADER.size + n != len(data):
            raise ProtocolError("frame length does not match payload")
        return decode(data[FRAME_HEADER.size :])

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_EOF)


def pipe(a_counter: Optional[NetCounter] = None,
         b_counter: Optional[NetCounter] = None) -> tuple[QueueConnection, QueueConnection]:
    ab, ba = queue.Queue(), queue.Queue()
    return QueueConnection(ba, ab, a_counter), QueueConnection(ab, ba, b_counter)
