"""Headless kernel client for scripts, tests, and the command line.

Speaks the same wire format as the kernel from the frontend side: DEALER
sockets for shell and control, SUB for iopub, REQ for heartbeat.  One
request is in flight at a time; iopub traffic is drained on a background
thread and matched to requests by parent msg_id, so output belonging to
other sessions is ignored rather than misattributed.
"""

from __future__ import annotations

import json
import logging
import queue
import socket as stdsocket
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import zmq

from .wire import (
    ConnectionInfo,
    MessageHeader,
    SIGNATURE_SCHEME,
    WireError,
    WireMessage,
    encode,
    verify,
)

log = logging.getLogger(__name__)

CONNECT_TIMEOUT = 2.0
EXEC_TIMEOUT = 10.0
INFO_TIMEOUT = 2.0
SHUTDOWN_TIMEOUT = 5.0


class ClientError(Exception):
    pass


class KernelUnreachable(ClientError):
    pass


class ReplyTimeout(ClientError):
    pass


@dataclass
class CollectedExecution:
    """One executed cell: its reply status and the full iopub trace,
    which always begins with status:busy and ends with status:idle."""

    code: str
    status: str
    execution_count: int
    trace: list[tuple[str, dict]] = field(default_factory=list)

    def outputs(self) -> dict[str, str]:
        data: dict[str, str] = {}
        for msg_type, content in self.trace:
            if msg_type == "execute_result":
                data.update(content.get("data", {}))
        return data

    def errors(self) -> list[dict]:
        return [content for msg_type, content in self.trace if msg_type == "error"]


class ClientSession:
    """A connection to one kernel.  Use from one thread at a time."""

    def __init__(self, conn: ConnectionInfo, process: subprocess.Popen | None = None,
                 connection_file: Path | None = None):
        self._conn = conn
        self.process = process
        self.connection_file = connection_file
        self._session_id = str(uuid.uuid4())
        self._username = "client"
        self._ctx = zmq.Context()
        self._shell = self._connected(zmq.DEALER, conn.shell_port)
        self._control = self._connected(zmq.DEALER, conn.control_port)
        self._hb = self._connected(zmq.REQ, conn.hb_port, relaxed=True)
        self._iopub = self._connected(zmq.SUB, conn.iopub_port)
        self._iopub.setsockopt(zmq.SUBSCRIBE, b"")
        self._iopub_queue: queue.Queue[WireMessage] = queue.Queue()
        self._stop = threading.Event()
        self._drainer = threading.Thread(target=self._drain_iopub,
                                         name="kf-client-iopub", daemon=True)
        self._drainer.start()
        self._closed = False

    @property
    def connection(self) -> ConnectionInfo:
        return self._conn

    # -- plumbing ----------------------------------------------------------

    def _connected(self, kind: int, port: int, relaxed: bool = False) -> zmq.Socket:
        sock = self._ctx.socket(kind)
        sock.linger = 0
        if relaxed:
            # Allow re-sending after a lost ping instead of wedging the REQ.
            sock.setsockopt(zmq.REQ_RELAXED, 1)
            sock.setsockopt(zmq.REQ_CORRELATE, 1)
        sock.connect(self._conn.url(port))
        return sock

    def _drain_iopub(self) -> None:
        poller = zmq.Poller()
        poller.register(self._iopub, zmq.POLLIN)
        while not self._stop.is_set():
            try:
                if not poller.poll(50):
                    continue
                frames = self._iopub.recv_multipart()
            except zmq.ZMQError:
                break
            try:
                self._iopub_queue.put(verify(frames, self._conn.key))
            except WireError as exc:
                log.warning("dropping malformed iopub message: %s", exc)

    def _send(self, socket: zmq.Socket, msg_type: str, content: dict) -> WireMessage:
        msg = WireMessage(
            header=MessageHeader.new(msg_type, self._session_id, self._username),
            content=content,
        )
        socket.send_multipart(encode(msg, self._conn.key))
        return msg

    def _recv_reply(self, socket: zmq.Socket, request: WireMessage,
                    timeout: float) -> WireMessage:
        deadline = time.monotonic() + timeout
        poller = zmq.Poller()
        poller.register(socket, zmq.POLLIN)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ReplyTimeout(
                    f"no reply to {request.header.msg_type} within {timeout}s")
            if not poller.poll(min(remaining, 0.1) * 1000):
                continue
            try:
                reply = verify(socket.recv_multipart(), self._conn.key)
            except WireError as exc:
                log.warning("dropping malformed reply: %s", exc)
                continue
            parent = reply.parent_header
            if parent is not None and parent.msg_id == request.header.msg_id:
                return reply
            log.debug("ignoring reply to someone else's %s", reply.header.msg_type)

    # -- operations --------------------------------------------------------

    def ping(self, timeout: float = CONNECT_TIMEOUT) -> float:
        """Heartbeat round trip; returns the latency in seconds."""
        payload = uuid.uuid4().bytes
        start = time.monotonic()
        self._hb.send(payload)
        poller = zmq.Poller()
        poller.register(self._hb, zmq.POLLIN)
        if not poller.poll(timeout * 1000):
            raise KernelUnreachable(f"kernel unreachable: no heartbeat echo in {timeout}s")
        echoed = self._hb.recv()
        if echoed != payload:
            raise KernelUnreachable("kernel unreachable: heartbeat echo did not match")
        return time.monotonic() - start

    def wait_until_ready(self, timeout: float = CONNECT_TIMEOUT) -> dict:
        """Beat the PUB/SUB race: retry kernel_info until its idle status
        is observed on iopub, proving our subscription is live."""
        deadline = time.monotonic() + timeout
        last_error: Exception | None = None
        while time.monotonic() < deadline:
            try:
                request = self._send(self._shell, "kernel_info_request", {})
                reply = self._recv_reply(self._shell, request, 0.5)
                self._await_idle(request.header.msg_id, deadline=time.monotonic() + 0.5)
                return reply.content
            except ClientError as exc:
                last_error = exc
        raise KernelUnreachable(f"kernel unreachable: not ready in {timeout}s ({last_error})")

    def _await_idle(self, parent_id: str, deadline: float) -> list[tuple[str, dict]]:
        trace: list[tuple[str, dict]] = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ReplyTimeout("iopub never went idle")
            try:
                msg = self._iopub_queue.get(timeout=min(remaining, 0.1))
            except queue.Empty:
                continue
            parent = msg.parent_header
            if parent is None or parent.msg_id != parent_id:
                continue
            trace.append((msg.header.msg_type, msg.content))
            if msg.header.msg_type == "status" \
                    and msg.content.get("execution_state") == "idle":
                return trace

    def exec_collect(self, code: str, silent: bool = False,
                     timeout: float = EXEC_TIMEOUT) -> CollectedExecution:
        """Execute `code` and gather its reply plus all of its iopub
        traffic, waiting for both the reply and the idle status."""
        request = self._send(self._shell, "execute_request", {
            "code": code,
            "silent": silent,
            "store_history": not silent,
            "user_expressions": {},
            "allow_stdin": False,
            "stop_on_error": False,
        })
        deadline = time.monotonic() + timeout
        trace = self._await_idle(request.header.msg_id, deadline)
        reply = self._recv_reply(self._shell, request,
                                 max(deadline - time.monotonic(), 0.1))
        return CollectedExecution(
            code=code,
            status=str(reply.content.get("status", "")),
            execution_count=int(reply.content.get("execution_count", -1)),
            trace=trace,
        )

    def kernel_info(self, timeout: float = INFO_TIMEOUT) -> dict:
        request = self._send(self._shell, "kernel_info_request", {})
        return self._recv_reply(self._shell, request, timeout).content

    def complete(self, code: str, cursor_pos: int | None = None,
                 timeout: float = INFO_TIMEOUT) -> dict:
        request = self._send(self._shell, "complete_request", {
            "code": code,
            "cursor_pos": len(code) if cursor_pos is None else cursor_pos,
        })
        return self._recv_reply(self._shell, request, timeout).content

    def shutdown(self, restart: bool = False,
                 timeout: float = SHUTDOWN_TIMEOUT) -> dict:
        """Shut the kernel down over the control channel.  When this
        session spawned the kernel, also wait for the process to exit."""
        request = self._send(self._control, "shutdown_request", {"restart": restart})
        reply = self._recv_reply(self._control, request, timeout)
        if self.process is not None:
            try:
                self.process.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                log.warning("kernel ignored shutdown; killing pid %d", self.process.pid)
                self.process.kill()
                self.process.wait(timeout=timeout)
        return reply.content

    def run_script(self, path: str | Path) -> tuple[str, bool]:
        """Run a newline-delimited cell script; returns the transcript and
        whether any cell errored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        transcript: list[str] = []
        errored = False
        for line in lines:
            if not line.strip():
                continue
            result = self.exec_collect(line)
            transcript.append(f"In [{result.execution_count}]: {line}")
            if result.status == "ok":
                text = self._render_outputs(result)
                if text is not None:
                    transcript.append(f"Out[{result.execution_count}]: {text}")
            else:
                errored = True
                evalue = result.errors()[-1]["evalue"] if result.errors() else result.status
                transcript.append(f"Err[{result.execution_count}]: {evalue}")
        return "\n".join(transcript) + "\n", errored

    @staticmethod
    def _render_outputs(result: CollectedExecution) -> str | None:
        data = result.outputs()
        if not data:
            return None
        if "text/plain" in data:
            return data["text/plain"]
        mime = sorted(data)[0]
        return f"({mime}) {data[mime]}"

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._stop.set()
        self._drainer.join(timeout=2)
        for sock in (self._shell, self._control, self._hb, self._iopub):
            sock.close(0)
        self._ctx.term()
        if self.process is not None and self.process.poll() is None:
            self.process.terminate()
            try:
                self.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.process.kill()
                self.process.wait(timeout=5)

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def connect(conn: ConnectionInfo, timeout: float = CONNECT_TIMEOUT,
            process: subprocess.Popen | None = None,
            connection_file: Path | None = None) -> ClientSession:
    """Attach to a running kernel; raises KernelUnreachable if the
    heartbeat stays silent for `timeout` seconds."""
    session = ClientSession(conn, process=process, connection_file=connection_file)
    try:
        session.ping(timeout)
        session.wait_until_ready(max(timeout, 1.0))
    except ClientError:
        session.close()
        raise
    return session


def pick_ports(count: int = 5) -> list[int]:
    """Distinct ports the OS considers free right now."""
    sockets = []
    try:
        for _ in range(count):
            s = stdsocket.socket()
            s.bind(("127.0.0.1", 0))
            sockets.append(s)
        return [s.getsockname()[1] for s in sockets]
    finally:
        for s in sockets:
            s.close()


def write_connection_file(directory: str | Path | None = None) -> tuple[Path, ConnectionInfo]:
    """Create a fresh connection file with free ports and a random key."""
    shell, iopub, stdin, control, hb = pick_ports(5)
    conn = ConnectionInfo(
        transport="tcp",
        ip="127.0.0.1",
        shell_port=shell,
        iopub_port=iopub,
        stdin_port=stdin,
        control_port=control,
        hb_port=hb,
        key=str(uuid.uuid4()).encode("ascii"),
        signature_scheme=SIGNATURE_SCHEME,
    )
    directory = Path(directory) if directory else Path(tempfile.mkdtemp(prefix="kernelforge-"))
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"kernel-{uuid.uuid4().hex[:8]}.json"
    path.write_text(json.dumps({
        "transport": conn.transport,
        "ip": conn.ip,
        "shell_port": conn.shell_port,
        "iopub_port": conn.iopub_port,
        "stdin_port": conn.stdin_port,
        "control_port": conn.control_port,
        "hb_port": conn.hb_port,
        "key": conn.key.decode("ascii"),
        "signature_scheme": conn.signature_scheme,
    }, indent=2), encoding="utf-8")
    return path, conn


def spawn_kernel(language: str, timeout: float = 10.0,
                 launcher: list[str] | None = None) -> ClientSession:
    """Start a kernel subprocess for `language` and attach to it."""
    path, conn = write_connection_file()
    argv = launcher or [sys.executable, "-m", "kernelforge"]
    proc = subprocess.Popen(
        [*argv, "serve", "--connection-file", str(path), "--language", language],
        stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True,
    )
    deadline = time.monotonic() + timeout
    last_error: Exception | None = None
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            stderr = proc.stderr.read() if proc.stderr else ""
            raise KernelUnreachable(
                f"kernel exited with code {proc.returncode} before it came up:\n{stderr}")
        try:
            # Attach the process only after the probe succeeds; a failed
            # probe's close() must not take the kernel down with it.
            session = connect(conn, timeout=0.5)
        except ClientError as exc:
            last_error = exc
            continue
        session.process = proc
        session.connection_file = path
        return session
    proc.kill()
    proc.wait(timeout=5)
    raise KernelUnreachable(f"kernel did not come up within {timeout}s ({last_error})")
