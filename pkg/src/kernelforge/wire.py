"""Jupyter wire protocol: connection files, message framing, signing, channels.

A kernel talks to its frontends over five ZeroMQ sockets (shell, control,
iopub, stdin, heartbeat).  Every message on the routed channels is a
multipart frame list::

    [identity, ..., b"<IDS|MSG>", signature, header, parent, metadata, content, buffer, ...]

The four JSON parts after the signature are authenticated with
HMAC-SHA256 over their serialized bytes, keyed by the shared secret from
the connection file.  This module owns that framing and the socket loops;
it knows nothing about what the messages mean.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import queue
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import zmq

log = logging.getLogger(__name__)

DELIMITER = b"<IDS|MSG>"
PROTOCOL_VERSION = "5.3"
SIGNATURE_SCHEME = "hmac-sha256"

_PORT_FIELDS = ("shell_port", "iopub_port", "stdin_port", "control_port", "hb_port")
_REQUIRED_KEYS = ("transport", "ip", "key", "signature_scheme") + _PORT_FIELDS


class WireError(Exception):
    """Base class for transport-level failures."""


class ConnectionFileError(WireError):
    """The connection file is missing, unreadable, or inconsistent."""


class FramingError(WireError):
    """An inbound frame list does not have the documented shape."""


class SignatureError(WireError):
    """The HMAC signature does not match the message body."""


@dataclass(frozen=True)
class ConnectionInfo:
    """Validated contents of a Jupyter connection file."""

    transport: str
    ip: str
    shell_port: int
    iopub_port: int
    stdin_port: int
    control_port: int
    hb_port: int
    key: bytes
    signature_scheme: str = SIGNATURE_SCHEME
    kernel_name: str = ""

    def __post_init__(self) -> None:
        if self.transport != "tcp":
            raise ConnectionFileError(f"unsupported transport {self.transport!r}")
        if self.signature_scheme != SIGNATURE_SCHEME:
            raise ConnectionFileError(
                f"unsupported signature scheme {self.signature_scheme!r}"
            )
        ports = [getattr(self, name) for name in _PORT_FIELDS]
        for name, port in zip(_PORT_FIELDS, ports):
            if not 1 <= port <= 65535:
                raise ConnectionFileError(f"{name} {port} outside 1..65535")
        if len(set(ports)) != len(ports):
            raise ConnectionFileError(f"ports must be distinct, got {ports}")

    def url(self, port: int) -> str:
        return f"{self.transport}://{self.ip}:{port}"


def parse_connection_file(path: str | Path) -> ConnectionInfo:
    """Read and validate a connection file written by a Jupyter frontend."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConnectionFileError(f"cannot read connection file {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConnectionFileError(f"connection file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConnectionFileError(f"connection file {path} must hold a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in data]
    if missing:
        raise ConnectionFileError(f"missing required key {missing[0]!r}")
    return ConnectionInfo(
        transport=data["transport"],
        ip=data["ip"],
        shell_port=data["shell_port"],
        iopub_port=data["iopub_port"],
        stdin_port=data["stdin_port"],
        control_port=data["control_port"],
        hb_port=data["hb_port"],
        key=str(data["key"]).encode("utf-8"),
        signature_scheme=data["signature_scheme"],
        kernel_name=str(data.get("kernel_name", "")),
    )


@dataclass(frozen=True)
class MessageHeader:
    msg_id: str
    session: str
    username: str
    date: str
    msg_type: str
    version: str = PROTOCOL_VERSION

    @classmethod
    def new(cls, msg_type: str, session: str, username: str) -> "MessageHeader":
        """Fresh header with a random msg_id and the current UTC time."""
        now = datetime.now(timezone.utc)
        return cls(
            msg_id=str(uuid.uuid4()),
            session=session,
            username=username,
            date=now.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z",
            msg_type=msg_type,
        )

    def to_dict(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "session": self.session,
            "username": self.username,
            "date": self.date,
            "msg_type": self.msg_type,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MessageHeader":
        return cls(
            msg_id=str(data.get("msg_id", "")),
            session=str(data.get("session", "")),
            username=str(data.get("username", "")),
            date=str(data.get("date", "")),
            msg_type=str(data.get("msg_type", "")),
            version=str(data.get("version", PROTOCOL_VERSION)),
        )


@dataclass
class WireMessage:
    """One protocol message plus its routing envelope."""

    header: MessageHeader
    parent_header: MessageHeader | None = None
    metadata: dict = field(default_factory=dict)
    content: dict = field(default_factory=dict)
    identities: list[bytes] = field(default_factory=list)
    buffers: list[bytes] = field(default_factory=list)


def _dump(part: dict) -> bytes:
    # sort_keys so equal dicts sign identically regardless of insertion order
    return json.dumps(part, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_parts(msg: WireMessage) -> tuple[bytes, bytes, bytes, bytes]:
    """The four signed JSON frames: header, parent, metadata, content."""
    parent = msg.parent_header.to_dict() if msg.parent_header else {}
    return (
        _dump(msg.header.to_dict()),
        _dump(parent),
        _dump(msg.metadata),
        _dump(msg.content),
    )


def sign_parts(parts: Iterable[bytes], key: bytes) -> str:
    """HMAC-SHA256 hex digest over the concatenated serialized parts."""
    mac = hmac.new(key, digestmod=hashlib.sha256)
    for part in parts:
        mac.update(part)
    return mac.hexdigest()


def sign(msg: WireMessage, key: bytes) -> str:
    return sign_parts(serialize_parts(msg), key)


def encode(msg: WireMessage, key: bytes) -> list[bytes]:
    """Frame and sign a message for the wire."""
    parts = serialize_parts(msg)
    signature = sign_parts(parts, key).encode("ascii")
    return [*msg.identities, DELIMITER, signature, *parts, *msg.buffers]


def _load_part(name: str, raw: bytes) -> dict:
    try:
        value = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FramingError(f"malformed {name} frame: {exc}") from exc
    if not isinstance(value, dict):
        raise FramingError(f"malformed {name} frame: expected a JSON object")
    return value


def verify(frames: Sequence[bytes], key: bytes) -> WireMessage:
    """Check the signature of an inbound frame list and decode it.

    The signature is checked before any JSON is parsed, so a tampered
    message is rejected as such even when the tampering broke the JSON.
    An empty key disables verification; inbound buffers are preserved.
    """
    try:
        split = frames.index(DELIMITER)
    except ValueError:
        raise FramingError("missing <IDS|MSG> delimiter") from None
    identities = list(frames[:split])
    rest = frames[split + 1 :]
    if len(rest) < 5:
        raise FramingError(f"truncated message: {len(rest)} frames after delimiter, need 5")
    signature, parts, buffers = rest[0], rest[1:5], list(rest[5:])
    if key:
        expected = sign_parts(parts, key).encode("ascii")
        if not hmac.compare_digest(expected, bytes(signature)):
            raise SignatureError("HMAC signature mismatch")
    header = _load_part("header", parts[0])
    parent = _load_part("parent_header", parts[1])
    metadata = _load_part("metadata", parts[2])
    content = _load_part("content", parts[3])
    return WireMessage(
        header=MessageHeader.from_dict(header),
        parent_header=MessageHeader.from_dict(parent) if parent else None,
        metadata=metadata,
        content=content,
        identities=identities,
        buffers=buffers,
    )


@dataclass
class DispatchResult:
    """What one inbound request produced: a reply, iopub traffic, shutdown."""

    reply: WireMessage | None = None
    iopub: list[WireMessage] = field(default_factory=list)
    shutdown: bool = False


Dispatcher = Callable[[WireMessage], DispatchResult]


@dataclass
class ChannelSet:
    """The five kernel-side sockets, bound and ready."""

    shell: zmq.Socket
    control: zmq.Socket
    iopub: zmq.Socket
    stdin: zmq.Socket
    heartbeat: zmq.Socket


def heartbeat_loop(socket: zmq.Socket, stop: threading.Event | None = None) -> None:
    """Echo every frame list back unchanged until told to stop.

    The heartbeat runs on its own socket and thread so frontends can
    detect a hung kernel; it must stay a pure echo.
    """
    poller = zmq.Poller()
    poller.register(socket, zmq.POLLIN)
    while stop is None or not stop.is_set():
        try:
            if poller.poll(100):
                socket.send_multipart(socket.recv_multipart())
        except zmq.ZMQError:
            break


class KernelService:
    """Owns the channel sockets and the threads that service them.

    Shell and control run their own loops so a shutdown request can be
    honoured while the shell is busy.  All iopub traffic funnels through
    a single publisher thread; each dispatch enqueues its messages as one
    batch so traffic from different requests never interleaves.
    """

    def __init__(self, conn: ConnectionInfo, dispatcher: Dispatcher):
        self._conn = conn
        self._dispatcher = dispatcher
        self._ctx: zmq.Context | None = None
        self._channels: ChannelSet | None = None
        self._iopub_queue: queue.Queue[list[WireMessage]] = queue.Queue()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._closed = False

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        conn = self._conn
        self._ctx = zmq.Context()
        try:
            self._channels = ChannelSet(
                shell=self._bind(zmq.ROUTER, conn.shell_port),
                control=self._bind(zmq.ROUTER, conn.control_port),
                iopub=self._bind(zmq.PUB, conn.iopub_port),
                stdin=self._bind(zmq.ROUTER, conn.stdin_port),
                heartbeat=self._bind(zmq.REP, conn.hb_port),
            )
        except zmq.ZMQError as exc:
            self._ctx.destroy(linger=0)
            self._ctx = None
            raise WireError(f"failed to bind kernel channels: {exc}") from exc
        if not conn.key:
            log.warning("connection file has an empty key; message signing is disabled")
        ch = self._channels
        self._threads = [
            threading.Thread(target=heartbeat_loop, args=(ch.heartbeat, self._stop),
                             name="kf-heartbeat", daemon=True),
            threading.Thread(target=self._router_loop, args=(ch.shell, "shell"),
                             name="kf-shell", daemon=True),
            threading.Thread(target=self._router_loop, args=(ch.control, "control"),
                             name="kf-control", daemon=True),
            threading.Thread(target=self._publisher_loop, args=(ch.iopub,),
                             name="kf-iopub", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the service is asked to stop.  True if it was."""
        return self._stop.wait(timeout)

    def stop(self, timeout: float = 5.0) -> None:
        """Stop the loops, flush iopub, close the sockets."""
        self._stop.set()
        for t in self._threads:
            t.join(timeout)
        if self._closed:
            return
        self._closed = True
        if self._channels is not None:
            self._channels.stdin.close(0)
            self._channels = None
        if self._ctx is not None:
            self._ctx.term()
            self._ctx = None

    @property
    def running(self) -> bool:
        return bool(self._threads) and not self._stop.is_set()

    # -- internals ---------------------------------------------------------

    def _bind(self, kind: int, port: int) -> zmq.Socket:
        assert self._ctx is not None
        sock = self._ctx.socket(kind)
        sock.linger = 1000
        sock.bind(self._conn.url(port))
        return sock

    def _router_loop(self, socket: zmq.Socket, name: str) -> None:
        poller = zmq.Poller()
        poller.register(socket, zmq.POLLIN)
        try:
            while not self._stop.is_set():
                try:
                    if not poller.poll(100):
                        continue
                    frames = socket.recv_multipart()
                except zmq.ZMQError:
                    break
                try:
                    msg = verify(frames, self._conn.key)
                except WireError as exc:
                    log.warning("dropping malformed message on %s: %s", name, exc)
                    continue
                try:
                    result = self._dispatcher(msg)
                except Exception:
                    log.exception("dispatcher failed on %s message %r",
                                  name, msg.header.msg_type)
                    continue
                if result.iopub:
                    self._iopub_queue.put(result.iopub)
                if result.reply is not None:
                    socket.send_multipart(encode(result.reply, self._conn.key))
                if result.shutdown:
                    self._stop.set()
        finally:
            socket.close(0)

    def _publisher_loop(self, socket: zmq.Socket) -> None:
        # Keeps draining after stop so the final idle always goes out.
        try:
            while not (self._stop.is_set() and self._iopub_queue.empty()):
                try:
                    batch = self._iopub_queue.get(timeout=0.05)
                except queue.Empty:
                    continue
                for msg in batch:
                    socket.send_multipart(encode(msg, self._conn.key))
        finally:
            socket.close()


def run_channels(conn: ConnectionInfo, dispatcher: Dispatcher) -> KernelService:
    """Bind all five channels and start serving `dispatcher`."""
    service = KernelService(conn, dispatcher)
    service.start()
    return service
