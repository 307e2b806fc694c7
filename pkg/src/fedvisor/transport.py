"""Server-side transports: an event-driven in-process simulator and TCP.

Both expose the same surface to the server task loop::

    send(client_id, msg)        deliver a message to one client
    recv(until) -> event|None   next Incoming/Disconnected event, or None
                                once ``until`` passes with nothing pending
    now()                       transport clock (simulated or monotonic)
"""

from __future__ import annotations

import heapq
import logging
import queue
import socket
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

from .client import FLClient, SimClock, TransportError, ExhaustedRetries, upload_with_retry
from .protocol import (
    DEFAULT_MAX_FRAME,
    FrameBuffer,
    IdentityCodec,
    JoinTask,
    Message,
    ParamCodec,
    ProtocolError,
    StartLocalTraining,
    UploadUpdate,
    decode_message,
    encode_message,
)
from .scheduler import simulate_upload_time

log = logging.getLogger(__name__)


@dataclass
class Incoming:
    client_id: str
    msg: Message
    nbytes: int
    arrival: float


@dataclass
class Disconnected:
    client_id: str


class InProcessTransport:
    """Runs ``FLClient`` objects in-process with a simulated clock.

    Each reply frame arrives ``simulate_upload_time(len(frame), bandwidth)``
    seconds after it was sent.  Clients train concurrently on a thread pool;
    arrival order is decided by simulated time then client id, so results
    do not depend on thread scheduling.

    ``failures`` maps a client id to a script of booleans consumed per
    upload attempt (True = attempt fails).  ``crash_at`` maps a client id to
    the round at which it silently dies.
    """

    def __init__(
        self,
        clients: list[FLClient],
        codec: ParamCodec | None = None,
        overhead_s: float = 0.0,
        failures: dict[str, list[bool]] | None = None,
        crash_at: dict[str, int] | None = None,
        reconnect_limit: int = 3,
        workers: int | None = None,
    ):
        self.clients = {c.client_id: c for c in clients}
        self.codec = codec or IdentityCodec()
        self.overhead_s = overhead_s
        self.failures = {k: list(v) for k, v in (failures or {}).items()}
        self.crash_at = dict(crash_at or {})
        self.reconnect_limit = reconnect_limit
        self.clock = 0.0
        self._heap: list = []
        self._seq = 0
        self._pending: list[tuple[float, str, Future]] = []
        self._dead: set[str] = set()
        self._pool = ThreadPoolExecutor(max_workers=workers or min(8, max(1, len(clients))))
        for c in self.clients.values():
            self._push(c.client_id, encode_message(c.join_message(), self.codec), 0.0)

    def now(self) -> float:
        return self.clock

    def _bandwidth(self, client_id: str) -> float:
        rep = self.clients[client_id].last_report
        return rep.bandwidth if rep is not None else 10.0

    def _push(self, client_id: str, frame: bytes, sent_at: float) -> None:
        arrival = sent_at + simulate_upload_time(len(frame), self._bandwidth(client_id), self.overhead_s)
        heapq.heappush(self._heap, (arrival, client_id, self._seq, frame))
        self._seq += 1

    def _deliver_replies(self, client_id: str, replies: list[Message], sent_at: float) -> None:
        for reply in replies:
            frame = encode_message(reply, self.codec)
            if isinstance(reply, UploadUpdate):
                clock = SimClock(sent_at)
                script = self.failures.get(client_id, [])

                def attempt(_msg, script=script):
                    if script and script.pop(0):
                        raise TransportError("scripted upload failure")

                try:
                    upload_with_retry(attempt, reply, self.reconnect_limit, clock)
                except ExhaustedRetries as e:
                    log.warning("%s: %s", client_id, e)
                    continue
                sent_at = clock.now
            self._push(client_id, frame, sent_at)

    def send(self, client_id: str, msg: Message) -> None:
        if client_id in self._dead:
            return
        client = self.clients[client_id]
        crash_round = self.crash_at.get(client_id)
        if isinstance(msg, StartLocalTraining) and crash_round is not None and msg.round >= crash_round:
            self._dead.add(client_id)
            heapq.heappush(self._heap, (self.clock, client_id, self._seq, None))
            self._seq += 1
            return
        decoded = decode_message(encode_message(msg, self.codec), self.codec)
        sent_at = self.clock
        if isinstance(msg, StartLocalTraining):
            self._pending.append((sent_at, client_id, self._pool.submit(client.handle, decoded)))
        else:
            self._drain()
            self._deliver_replies(client_id, client.handle(decoded), sent_at)

    def _drain(self) -> None:
        pending, self._pending = self._pending, []
        for sent_at, client_id, fut in sorted(pending, key=lambda p: (p[0], p[1])):
            self._deliver_replies(client_id, fut.result(), sent_at)

    def recv(self, until: float | None = None):
        self._drain()
        if not self._heap:
            if until is not None:
                self.clock = max(self.clock, until)
            return None
        arrival, client_id, _, frame = self._heap[0]
        if until is not None and arrival > until:
            self.clock = max(self.clock, until)
            return None
        heapq.heappop(self._heap)
        self.clock = max(self.clock, arrival)
        if frame is None:
            return Disconnected(client_id)
        return Incoming(client_id, decode_message(frame, self.codec), len(frame), arrival)

    def close(self) -> None:
        self._pool.shutdown(wait=True)


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.alive = True

    def send(self, frame: bytes) -> None:
        with self.lock:
            self.sock.sendall(frame)

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpServerTransport:
    """Accepts client connections for one task over the framed wire format.

    One reader thread per connection pushes decoded messages into a queue
    drained by the task loop.  A client that reconnects with the same id
    replaces its previous connection.
    """

    def __init__(
        self,
        host: str,
        port: int,
        task_id: str,
        codec: ParamCodec | None = None,
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self.task_id = task_id
        self.codec = codec or IdentityCodec()
        self.max_frame = max_frame
        self._events: queue.Queue = queue.Queue()
        self._conns: dict[str, _Conn] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()[:2]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def now(self) -> float:
        return time.monotonic()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._read_loop, args=(_Conn(sock),), daemon=True).start()

    def _read_loop(self, conn: _Conn) -> None:
        buf = FrameBuffer(self.codec, self.max_frame)
        client_id = None
        try:
            while not self._closed.is_set():
                data = conn.sock.recv(1 << 16)
                if not data:
                    break
                for msg, nbytes in buf.feed(data):
                    if client_id is None:
                        if not isinstance(msg, JoinTask):
                            raise ProtocolError("first message must be JoinTask")
                        client_id = msg.sender_id
                        with self._lock:
                            old = self._conns.get(client_id)
                            self._conns[client_id] = conn
                        if old is not None and old is not conn:
                            old.close()
                    self._events.put(Incoming(client_id, msg, nbytes, self.now()))
        except (OSError, ProtocolError) as e:
            log.warning("connection %s closed: %s", client_id, e)
        finally:
            with self._lock:
                current = self._conns.get(client_id)
                if current is conn:
                    del self._conns[client_id]
                    lost = True
                else:
                    lost = False
            conn.close()
            if client_id is not None and lost:
                self._events.put(Disconnected(client_id))

    def send(self, client_id: str, msg: Message) -> None:
        with self._lock:
            conn = self._conns.get(client_id)
        if conn is None:
            return
        try:
            conn.send(encode_message(msg, self.codec))
        except OSError as e:
            log.warning("send to %s failed: %s", client_id, e)
            conn.close()

    def recv(self, until: float | None = None):
        timeout = None if until is None else max(0.0, until - self.now())
        try:
            return self._events.get(timeout=timeout if timeout is not None else 0.05)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.close()


def _connect(host: str, port: int, timeout: float = 5.0) -> socket.socket:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def connect_with_retry(host: str, port: int, reconnect_limit: int, clock=None, base_backoff: float = 0.5):
    """Connect, retrying up to ``reconnect_limit`` times with doubling backoff."""
    from .client import RealClock

    clock = clock or RealClock()
    delay = base_backoff
    last = None
    for attempt in range(reconnect_limit + 1):
        try:
            return _connect(host, port)
        except OSError as e:
            last = e
            log.info("connect to %s:%d failed (attempt %d): %s", host, port, attempt + 1, e)
            if attempt < reconnect_limit:
                clock.sleep(delay)
                delay *= 2
    raise ExhaustedRetries(reconnect_limit + 1, last)


def run_tcp_client(
    client: FLClient,
    host: str,
    port: int,
    reconnect_limit: int = 3,
    codec: ParamCodec | None = None,
    base_backoff: float = 0.5,
    stop: threading.Event | None = None,
) -> None:
    """Drive ``client`` against a TCP server until the task finishes."""
    from .client import RealClock

    codec = codec or IdentityCodec()
    clock = RealClock()
    state = {"sock": None, "buf": None}

    def reconnect():
        if state["sock"] is not None:
            try:
                state["sock"].close()
            except OSError:
                pass
        state["sock"] = connect_with_retry(host, port, reconnect_limit, clock, base_backoff)
        state["sock"].sendall(encode_message(client.join_message(), codec))
        state["buf"] = FrameBuffer(codec)

    def send(msg: Message) -> None:
        try:
            state["sock"].sendall(encode_message(msg, codec))
        except OSError as e:
            reconnect()
            raise TransportError(str(e)) from e

    reconnect()
    while not client.done and not (stop and stop.is_set()):
        try:
            data = state["sock"].recv(1 << 16)
        except OSError:
            data = b""
        if not data:
            if client.done:
                break
            log.warning("%s: connection lost, reconnecting", client.client_id)
            reconnect()
            continue
        for msg, _ in state["buf"].feed(data):
            for reply in client.handle(msg):
                upload_with_retry(send, reply, reconnect_limit, clock, base_backoff)
    try:
        state["sock"].close()
    except OSError:
        pass
