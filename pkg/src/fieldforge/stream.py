"""Brokered frame streaming.

The broker only hands out renderer endpoints (signaling plane); frames go
straight from renderer to collector over their own TCP connection (media
plane). Frames are sent on an absolute schedule so that one slow frame does
not shift the slots of the ones after it.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .frames import FrameSet

log = logging.getLogger(__name__)

MAGIC = b"SYNF"
VERSION = 1
HEADER = struct.Struct("<4sHHQQQIIIII")
HEADER_SIZE = HEADER.size  # 52
CH_RGB, CH_LABEL, CH_DEPTH = 1, 2, 4
CH_ALL = CH_RGB | CH_LABEL | CH_DEPTH
_BYTES_PER_PIXEL = ((CH_RGB, 3), (CH_LABEL, 2), (CH_DEPTH, 4))


class StreamError(Exception):
    pass


class ProtocolError(StreamError):
    """Malformed bytes on the wire; the connection cannot be trusted anymore."""


class IncompleteFrame(StreamError):
    """The stream ended inside a frame."""


class SendError(StreamError):
    def __init__(self, message: str, frames_sent: int):
        super().__init__(message)
        self.frames_sent = frames_sent


def parse_endpoint(text: str, allow_ephemeral: bool = False) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    low = 0 if allow_ephemeral else 1
    if not sep or not host or not port.isdigit() or not low <= int(port) < 65536 or any(c.isspace() for c in host):
        raise ValueError(f"bad endpoint {text!r}")
    return host, int(port)


def format_endpoint(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


# ---------------------------------------------------------------- frame codec


@dataclass(frozen=True)
class FrameHeader:
    channel_mask: int
    frame_id: int
    scene_id: int
    sim_time_us: int
    width: int
    height: int
    len_rgb: int
    len_label: int
    len_depth: int
    version: int = VERSION

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.channel_mask, self.frame_id, self.scene_id,
                           self.sim_time_us, self.width, self.height, self.len_rgb, self.len_label,
                           self.len_depth)

    @classmethod
    def unpack(cls, data: bytes) -> "FrameHeader":
        if len(data) < HEADER_SIZE:
            raise IncompleteFrame(f"header truncated at {len(data)} bytes")
        magic, version, mask, fid, sid, t_us, w, h, lr, ll, ld = HEADER.unpack(data[:HEADER_SIZE])
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        if mask & ~CH_ALL:
            raise ProtocolError(f"unknown channel bits in mask {mask:#x}")
        hdr = cls(mask, fid, sid, t_us, w, h, lr, ll, ld, version)
        n = w * h
        for (bit, bpp), got in zip(_BYTES_PER_PIXEL, (lr, ll, ld)):
            want = n * bpp if mask & bit else 0
            if got != want:
                raise ProtocolError(f"channel {bit}: declared {got} bytes, expected {want}")
        return hdr

    @property
    def payload_len(self) -> int:
        return self.len_rgb + self.len_label + self.len_depth


def encode_frame(frame: FrameSet, channel_mask: int = CH_ALL) -> bytes:
    if channel_mask & ~CH_ALL:
        raise ValueError(f"unknown channel bits in mask {channel_mask:#x}")
    planes = ((CH_RGB, frame.rgb), (CH_LABEL, frame.label), (CH_DEPTH, frame.depth))
    for bit, plane in planes:
        if channel_mask & bit and plane is None:
            raise ValueError(f"mask selects channel {bit} which the frame does not carry")
    h, w = frame.shape
    payloads = []
    if channel_mask & CH_RGB:
        payloads.append(np.ascontiguousarray(frame.rgb, dtype=np.uint8).tobytes())
    if channel_mask & CH_LABEL:
        payloads.append(np.ascontiguousarray(frame.label, dtype="<u2").tobytes())
    if channel_mask & CH_DEPTH:
        payloads.append(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
    lens = [w * h * bpp if channel_mask & bit else 0 for bit, bpp in _BYTES_PER_PIXEL]
    hdr = FrameHeader(channel_mask, frame.frame_id, frame.scene_id, int(round(frame.sim_time * 1e6)),
                      w, h, *lens)
    return hdr.pack() + b"".join(payloads)


def _materialize(hdr: FrameHeader, payload: bytes) -> FrameSet:
    w, h = hdr.width, hdr.height
    off = 0
    rgb = label = depth = None
    if hdr.channel_mask & CH_RGB:
        rgb = np.frombuffer(payload, np.uint8, hdr.len_rgb, off).reshape(h, w, 3).copy()
        off += hdr.len_rgb
    if hdr.channel_mask & CH_LABEL:
        label = np.frombuffer(payload, "<u2", w * h, off).reshape(h, w).astype(np.uint16)
        off += hdr.len_label
    if hdr.channel_mask & CH_DEPTH:
        depth = np.frombuffer(payload, "<f4", w * h, off).reshape(h, w).astype(np.float32)
    return FrameSet(rgb, label, depth, scene_id=hdr.scene_id, frame_id=hdr.frame_id,
                    sim_time=hdr.sim_time_us / 1e6)


def decode_frame(data: bytes) -> FrameSet:
    hdr = FrameHeader.unpack(data)
    end = HEADER_SIZE + hdr.payload_len
    if len(data) < end:
        raise IncompleteFrame(f"payload truncated: have {len(data) - HEADER_SIZE} of {hdr.payload_len} bytes")
    if len(data) > end:
        raise ProtocolError(f"{len(data) - end} trailing bytes after frame")
    return _materialize(hdr, data[HEADER_SIZE:end])


def _read_exact(reader, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = reader.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class FrameReader:
    """Reads consecutive frames from a binary file-like object."""

    def __init__(self, reader):
        self.reader = reader
        self.poisoned = False
        self.bytes_read = 0

    def read_frame(self) -> Optional[FrameSet]:
        """Next frame, or ``None`` on a clean end of stream."""
        if self.poisoned:
            raise ProtocolError("connection poisoned by an earlier protocol error")
        head = _read_exact(self.reader, HEADER_SIZE)
        self.bytes_read += len(head)
        if not head:
            return None
        try:
            hdr = FrameHeader.unpack(head)
        except ProtocolError:
            self.poisoned = True
            raise
        payload = _read_exact(self.reader, hdr.payload_len)
        self.bytes_read += len(payload)
        if len(payload) < hdr.payload_len:
            raise IncompleteFrame(f"frame {hdr.frame_id}: got {len(payload)} of {hdr.payload_len} payload bytes")
        return _materialize(hdr, payload)

    def __iter__(self):
        while True:
            frame = self.read_frame()
            if frame is None:
                return
            yield frame


# ---------------------------------------------------------------- signaling


@dataclass
class SessionRecord:
    session_id: str
    endpoint: str
    created: float
    status: str = "open"


class _BrokerHandler(socketserver.StreamRequestHandler):
    def handle(self):
        broker: Broker = self.server.broker
        for raw in self.rfile:
            broker._count_in(len(raw))
            reply = broker.handle_line(raw.decode("utf-8", errors="replace"))
            data = reply.encode("utf-8")
            broker._count_out(len(data))
            try:
                self.wfile.write(data)
                self.wfile.flush()
            except OSError:
                return


class _ThreadingServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Broker:
    """Session broker speaking the line protocol.

    ``REGISTER host:port`` / ``LIST`` / ``JOIN id`` / ``CLOSE id``; every
    mutation of the session table happens under one lock, so the first JOIN
    of a session wins and any later one gets ``ERR joined``.
    """

    def __init__(self, bind: str = "127.0.0.1:0"):
        host, port = parse_endpoint(bind, allow_ephemeral=True)
        self._server = _ThreadingServer((host, port), _BrokerHandler)
        self._server.broker = self
        self._lock = threading.Lock()
        self._sessions: dict[str, SessionRecord] = {}
        self._next_id = 1
        self._thread: Optional[threading.Thread] = None
        self.bytes_in = 0
        self.bytes_out = 0

    @property
    def address(self) -> str:
        return format_endpoint(self._server.server_address[:2])

    @property
    def byte_volume(self) -> int:
        return self.bytes_in + self.bytes_out

    def _count_in(self, n):
        with self._lock:
            self.bytes_in += n

    def _count_out(self, n):
        with self._lock:
            self.bytes_out += n

    def start(self) -> "Broker":
        self._thread = threading.Thread(target=self._server.serve_forever, name="broker", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def wait(self) -> None:
        """Block until the server thread exits (i.e. after :meth:`stop`)."""
        if self._thread:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def sessions(self) -> list[SessionRecord]:
        with self._lock:
            return list(self._sessions.values())

    def handle_line(self, line: str) -> str:
        parts = line.strip().split()
        if not parts:
            return "ERR syntax\n"
        cmd, args = parts[0], parts[1:]
        with self._lock:
            if cmd == "REGISTER" and len(args) == 1:
                try:
                    parse_endpoint(args[0])
                except ValueError:
                    return "ERR syntax\n"
                sid = str(self._next_id)
                self._next_id += 1
                self._sessions[sid] = SessionRecord(sid, args[0], time.time())
                return f"SESSION {sid}\n"
            if cmd == "LIST" and not args:
                lines = [f"SESSIONS {len(self._sessions)}"]
                lines += [f"{s.session_id} {s.endpoint} {s.status}" for s in self._sessions.values()]
                return "\n".join(lines) + "\n"
            if cmd in ("JOIN", "CLOSE") and len(args) == 1:
                rec = self._sessions.get(args[0])
                if rec is None or rec.status == "closed":
                    return "ERR notfound\n"
                if cmd == "CLOSE":
                    rec.status = "closed"
                    return "OK\n"
                if rec.status == "joined":
                    return "ERR joined\n"
                rec.status = "joined"
                return f"PEER {rec.endpoint}\n"
        return "ERR syntax\n"


def serve_signaling(bind: str = "127.0.0.1:0") -> Broker:
    return Broker(bind).start()


class BrokerClient:
    """One persistent line-protocol connection to a broker."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.file = self.sock.makefile("rwb")

    def request(self, line: str) -> list[str]:
        self.file.write(line.rstrip("\n").encode() + b"\n")
        self.file.flush()
        first = self.file.readline().decode().rstrip("\n")
        if not first:
            raise ConnectionError("broker closed the connection")
        out = [first]
        if first.startswith("SESSIONS "):
            for _ in range(int(first.split()[1])):
                out.append(self.file.readline().decode().rstrip("\n"))
        return out

    def register(self, endpoint: str) -> str:
        reply = self.request(f"REGISTER {endpoint}")[0]
        if not reply.startswith("SESSION "):
            raise StreamError(f"register failed: {reply}")
        return reply.split()[1]

    def join(self, session_id: str) -> str:
        reply = self.request(f"JOIN {session_id}")[0]
        if not reply.startswith("PEER "):
            raise StreamError(f"join failed: {reply}")
        return reply.split()[1]

    def close_session(self, session_id: str) -> str:
        return self.request(f"CLOSE {session_id}")[0]

    def list_sessions(self) -> list[tuple[str, str, str]]:
        lines = self.request("LIST")
        return [tuple(l.split()) for l in lines[1:]]

    def close(self):
        try:
            self.file.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- media plane


@dataclass
class SendReport:
    start: float
    timestamps: list = field(default_factory=list)
    bytes_sent: int = 0

    @property
    def frames_sent(self) -> int:
        return len(self.timestamps)

    def intervals(self) -> np.ndarray:
        return np.diff(np.asarray(self.timestamps))


def paced_send(conn, frames: Iterable, target_fps: float, channel_mask: int = CH_ALL,
               clock: Callable[[], float] = time.perf_counter,
               sleep: Callable[[float], None] = time.sleep) -> SendReport:
    """Send frames (FrameSets or pre-encoded bytes) on an absolute time grid.

    Frame k leaves no earlier than ``start + k / target_fps``. Nothing is
    ever dropped; a late frame is sent immediately and the next slot is
    still measured from ``start``.
    """
    if not target_fps > 0:
        raise ValueError("target_fps must be > 0")
    period = 1.0 / target_fps
    start = clock()
    report = SendReport(start)
    for k, frame in enumerate(frames):
        data = frame if isinstance(frame, (bytes, bytearray)) else encode_frame(frame, channel_mask)
        slot = start + k * period
        now = clock()
        while now < slot:
            sleep(slot - now)
            now = clock()
        try:
            conn.sendall(data)
        except OSError as exc:
            raise SendError(f"send failed after {k} frames: {exc}", k) from exc
        report.timestamps.append(now)
        report.bytes_sent += len(data)
    return report


class FrameServer:
    """Renderer side of one session: listen, register, stream to the first collector."""

    def __init__(self, broker: str, frames: list, fps: float, host: str = "127.0.0.1",
                 channel_mask: int = CH_ALL, accept_timeout: float = 60.0):
        self.frames = frames
        self.fps = fps
        self.channel_mask = channel_mask
        self._listener = socket.create_server((host, 0))
        self._listener.settimeout(accept_timeout)
        self.endpoint = format_endpoint(self._listener.getsockname()[:2])
        with BrokerClient(broker) as client:
            self.session_id = client.register(self.endpoint)
        self.report: Optional[SendReport] = None
        self.error: Optional[BaseException] = None
        self._thread: Optional[threading.Thread] = None

    def serve(self) -> SendReport:
        try:
            conn, _ = self._listener.accept()
        finally:
            self._listener.close()
        with conn:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.report = paced_send(conn, self.frames, self.fps, self.channel_mask)
            conn.shutdown(socket.SHUT_WR)
        log.debug("session %s: sent %d frames", self.session_id, self.report.frames_sent)
        return self.report

    def _run(self):
        try:
            self.serve()
        except BaseException as exc:  # surfaced through join()
            self.error = exc

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._run, name=f"render-{self.session_id}", daemon=True)
        self._thread.start()
        return self

    def join(self, timeout: Optional[float] = None) -> SendReport:
        if self._thread:
            self._thread.join(timeout)
        if self.error:
            raise self.error
        return self.report


def collect(broker: str, session_id: str, sink: Callable[[FrameSet], None], timeout: float = 60.0) -> int:
    """Join a session and deliver every received frame to ``sink`` in order.

    Returns the number of complete frames; a frame cut off by the end of the
    stream is logged and not delivered.
    """
    with BrokerClient(broker, timeout=timeout) as client:
        peer = client.join(session_id)
    count = 0
    with socket.create_connection(parse_endpoint(peer), timeout=timeout) as sock:
        reader = FrameReader(sock.makefile("rb"))
        try:
            for frame in reader:
                sink(frame)
                count += 1
        except IncompleteFrame as exc:
            log.warning("session %s: incomplete final frame after %d frames (%s)", session_id, count, exc)
    return count
