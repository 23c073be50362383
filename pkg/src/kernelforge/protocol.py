"""Language-independent kernel behaviour.

A language backend implements :class:`LanguageProtocol` (or, for plain
REPLs, just provides a :class:`ReplDefinition` and lets :func:`adapt_repl`
fill in the rest).  :func:`dispatch` turns one inbound request into its
reply and iopub traffic; it owns execution counting, history, busy/idle
bracketing and error reporting, so backends only ever see source text.
"""

from __future__ import annotations

import logging
import threading
import traceback
import uuid
from dataclasses import dataclass, field
from typing import Callable

from . import __version__
from .wire import DispatchResult, MessageHeader, WireMessage, PROTOCOL_VERSION

log = logging.getLogger(__name__)

COMPLETE = "complete"
INCOMPLETE = "incomplete"
INVALID = "invalid"

IMPLEMENTATION = "kernelforge"

# All failed executions report this exception name; DSLs have diagnostics,
# not Python exception classes.
ERROR_NAME = "DSLError"


@dataclass(frozen=True)
class SourceSpan:
    """Half-open character range `begin..end` with 1-based line/column."""

    begin: int
    end: int
    line: int = 1
    column: int = 1

    @classmethod
    def at(cls, text: str, begin: int, end: int | None = None) -> "SourceSpan":
        begin = max(0, min(begin, len(text)))
        if end is None:
            end = min(begin + 1, len(text))
        line = text.count("\n", 0, begin) + 1
        column = begin - text.rfind("\n", 0, begin)
        return cls(begin=begin, end=end, line=line, column=column)


@dataclass(frozen=True)
class Diagnostic:
    message: str
    location: SourceSpan | None = None

    def render(self) -> str:
        if self.location is None:
            return self.message
        loc = self.location
        return f"{self.message} at line {loc.line}, column {loc.column} (offset {loc.begin})"


@dataclass
class ExecutionResult:
    """What one execution produced: MIME outputs and/or diagnostics."""

    outputs: dict[str, str] = field(default_factory=dict)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.outputs) or not self.diagnostics


@dataclass
class CompletionResult:
    """Suggestions plus the offset where the completed fragment starts."""

    position: int
    suggestions: list[str] = field(default_factory=list)


@dataclass
class ReplDefinition:
    """The two functions that make a REPL, plus optional refinements."""

    handler: Callable[[str], ExecutionResult]
    completor: Callable[[str], CompletionResult] | None = None
    is_complete: Callable[[str], str] | None = None
    prompt: str = ">"


class LanguageProtocol:
    """Everything the dispatcher needs from a language backend.

    Only :meth:`handle_input` is mandatory.  The remaining hooks default
    to honest no-ops so a minimal backend stays minimal.
    """

    def initialize(self, stdout: Callable[[str], None],
                   stderr: Callable[[str], None]) -> None:
        """Receive the sinks a streaming backend should print through."""
        self.stdout = stdout
        self.stderr = stderr

    def prompt(self) -> str:
        return ">"

    def handle_input(self, code: str, output: dict[str, str],
                     metadata: dict[str, str]) -> list[Diagnostic]:
        """Run one cell, fill `output` with MIME data, return diagnostics."""
        raise NotImplementedError

    def handle_reset(self) -> None:
        """Discard all interpreter state."""

    def supports_completion(self) -> bool:
        return False

    def complete_fragment(self, code: str, cursor: int) -> CompletionResult:
        return CompletionResult(position=cursor)

    def is_statement_complete(self, code: str) -> str:
        return COMPLETE

    def print_space_after_full_completion(self) -> bool:
        return False

    def cancel_running(self) -> None:
        """Ask a running execution to stop; must only flip flags."""

    def stack_trace_requested(self) -> None:
        pass

    def terminate(self) -> None:
        """Finish pending work before the kernel exits; stop() follows."""

    def stop(self) -> None:
        """Release resources at kernel shutdown."""


class ReplLanguage(LanguageProtocol):
    """Adapter that runs a :class:`ReplDefinition` behind the full interface."""

    def __init__(self, definition: ReplDefinition,
                 factory: Callable[[], ReplDefinition] | None = None):
        self._definition = definition
        self._factory = factory

    def prompt(self) -> str:
        return self._definition.prompt

    def handle_input(self, code, output, metadata):
        result = self._definition.handler(code)
        output.update(result.outputs)
        return list(result.diagnostics)

    def handle_reset(self):
        # A REPL's state lives in its closures, so reset means rebuild.
        if self._factory is not None:
            self._definition = self._factory()

    def supports_completion(self):
        return self._definition.completor is not None

    def complete_fragment(self, code, cursor):
        completor = self._definition.completor
        if completor is None:
            return CompletionResult(position=cursor)
        return completor(code[:cursor])

    def is_statement_complete(self, code):
        if self._definition.is_complete is None:
            return COMPLETE
        return self._definition.is_complete(code)


def adapt_repl(definition: ReplDefinition,
               factory: Callable[[], ReplDefinition] | None = None) -> LanguageProtocol:
    """Wrap a plain REPL definition in the full language interface."""
    return ReplLanguage(definition, factory)


def make_interpreter(language) -> LanguageProtocol:
    """Instantiate a registered language with reset support.

    `language` is a registry entry name, or any descriptor whose `entry`
    field names one.
    """
    from . import registry

    entry = getattr(language, "entry", language)
    record = registry.get_language(entry)
    return adapt_repl(record.factory(), factory=record.factory)


@dataclass(frozen=True)
class LanguageInfo:
    """Metadata reported by kernel_info and written into notebooks."""

    name: str
    version: str = "0.1.0"
    mimetype: str = "text/plain"
    file_extension: str = ".txt"
    codemirror_mode: str = ""
    banner: str = ""


@dataclass
class SessionState:
    """Mutable per-kernel state threaded through the request handlers."""

    language: LanguageProtocol
    info: LanguageInfo
    session_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    username: str = "kernel"
    execution_count: int = 1
    history: list[tuple[int, str]] = field(default_factory=list)
    shutdown_requested: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


SideMessages = list[tuple[str, dict]]


def _diagnostic_error(diagnostics: list[Diagnostic]) -> dict:
    return {
        "ename": ERROR_NAME,
        "evalue": diagnostics[0].message if diagnostics else "",
        "traceback": [d.render() for d in diagnostics],
    }


def process_execute_request(content: dict, state: SessionState) -> tuple[dict, SideMessages]:
    """Run one cell.  Returns the reply content and the iopub messages.

    Silent executions still run (side effects included) but leave no
    visible trace: no iopub output, no count increment, no history entry.
    """
    code = str(content.get("code", ""))
    silent = bool(content.get("silent", False))
    count = state.execution_count
    iopub: SideMessages = []
    if not silent:
        iopub.append(("execute_input", {"code": code, "execution_count": count}))

    output: dict[str, str] = {}
    metadata: dict[str, str] = {}
    try:
        diagnostics = state.language.handle_input(code, output, metadata) or []
    except Exception as exc:  # backend broke its no-throw contract
        log.exception("language backend failed on %r", code)
        error = {
            "ename": type(exc).__name__,
            "evalue": str(exc),
            "traceback": traceback.format_exc().splitlines(),
        }
        if not silent:
            iopub.append(("error", error))
            state.history.append((count, code))
            state.execution_count += 1
        return {"status": "error", "execution_count": count, **error}, iopub

    failed = bool(diagnostics) and not output
    if not silent:
        if output:
            iopub.append(("execute_result", {
                "data": dict(output),
                "metadata": {},
                "execution_count": count,
            }))
        if diagnostics:
            iopub.append(("error", _diagnostic_error(diagnostics)))
        state.history.append((count, code))
        state.execution_count += 1

    if failed:
        return {"status": "error", "execution_count": count,
                **_diagnostic_error(diagnostics)}, iopub
    return {"status": "ok", "execution_count": count,
            "payload": [], "user_expressions": {}}, iopub


def process_complete_request(content: dict, state: SessionState) -> dict:
    code = str(content.get("code", ""))
    cursor = int(content.get("cursor_pos", len(code)))
    if not state.language.supports_completion():
        return {"status": "ok", "matches": [], "cursor_start": cursor,
                "cursor_end": cursor, "metadata": {}}
    result = state.language.complete_fragment(code, cursor)
    return {
        "status": "ok",
        "matches": list(result.suggestions),
        "cursor_start": result.position,
        "cursor_end": cursor,
        "metadata": {},
    }


def process_is_complete_request(content: dict, state: SessionState) -> dict:
    status = state.language.is_statement_complete(str(content.get("code", "")))
    if status not in (COMPLETE, INCOMPLETE, INVALID):
        log.warning("backend returned unknown completeness %r", status)
        status = INVALID
    reply = {"status": status}
    if status == INCOMPLETE:
        reply["indent"] = ""
    return reply


def process_kernel_info_request(state: SessionState) -> dict:
    info = state.info
    return {
        "status": "ok",
        "protocol_version": PROTOCOL_VERSION,
        "implementation": IMPLEMENTATION,
        "implementation_version": __version__,
        "language_info": {
            "name": info.name,
            "version": info.version,
            "mimetype": info.mimetype,
            "file_extension": info.file_extension,
            "codemirror_mode": info.codemirror_mode or info.name,
        },
        "banner": info.banner or f"{info.name} ({IMPLEMENTATION} {__version__})",
    }


def process_history_request(state: SessionState) -> dict:
    # Single-session kernel: the session number is always 0.
    return {"status": "ok",
            "history": [[0, line, code] for line, code in state.history]}


def process_inspect_request(content: dict, state: SessionState) -> dict:
    return {"status": "ok", "found": False, "data": {}, "metadata": {}}


def process_comm_info_request(content: dict, state: SessionState) -> dict:
    return {"status": "ok", "comms": {}}


def process_shutdown_request(content: dict, state: SessionState) -> dict:
    restart = bool(content.get("restart", False))
    state.language.stop()
    state.shutdown_requested = True
    return {"status": "ok", "restart": restart}


_HANDLERS: dict[str, Callable[[dict, SessionState], dict]] = {
    "complete_request": process_complete_request,
    "is_complete_request": process_is_complete_request,
    "kernel_info_request": lambda content, state: process_kernel_info_request(state),
    "history_request": lambda content, state: process_history_request(state),
    "inspect_request": process_inspect_request,
    "comm_info_request": process_comm_info_request,
}


def _child(msg_type: str, content: dict, parent: WireMessage,
           state: SessionState, identities: list[bytes] | None = None) -> WireMessage:
    return WireMessage(
        header=MessageHeader.new(msg_type, state.session_id, state.username),
        parent_header=parent.header,
        content=content,
        identities=identities if identities is not None else [msg_type.encode("ascii")],
    )


def _status(execution_state: str, parent: WireMessage, state: SessionState) -> WireMessage:
    return _child("status", {"execution_state": execution_state}, parent, state)


def dispatch(msg: WireMessage, state: SessionState) -> DispatchResult:
    """Handle one request: compute the reply and the iopub traffic.

    Every shell request is bracketed by busy/idle status messages carrying
    the request's header as parent.  Unknown message types are logged and
    ignored without an answer.  Shutdown bypasses the session lock so it
    works while an execution holds it; backends' stop() must be flag-only.
    """
    msg_type = msg.header.msg_type
    if msg_type == "shutdown_request":
        content = process_shutdown_request(msg.content, state)
        reply = _child("shutdown_reply", content, msg, state, identities=msg.identities)
        return DispatchResult(reply=reply, shutdown=True)

    if msg_type == "execute_request":
        pass
    elif msg_type not in _HANDLERS:
        log.warning("ignoring unknown message type %r", msg_type)
        return DispatchResult()

    with state.lock:
        iopub = [_status("busy", msg, state)]
        side: SideMessages = []
        try:
            if msg_type == "execute_request":
                content, side = process_execute_request(msg.content, state)
            else:
                content = _HANDLERS[msg_type](msg.content, state)
        except Exception as exc:  # a handler bug must not kill the channel loop
            log.exception("handler for %r failed", msg_type)
            error = {
                "ename": type(exc).__name__,
                "evalue": str(exc),
                "traceback": traceback.format_exc().splitlines(),
            }
            content = {"status": "error", **error}
            side = [("error", error)]
        iopub.extend(_child(t, c, msg, state) for t, c in side)
        iopub.append(_status("idle", msg, state))
        reply_type = msg_type.replace("_request", "_reply")
        reply = _child(reply_type, content, msg, state, identities=msg.identities)
    return DispatchResult(reply=reply, iopub=iopub)
