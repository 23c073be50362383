"""Acceptance gate: one test per criterion, end to end where the criterion
demands it.  Run with `pytest tests/test_acceptance.py -v -s` to see one
PASS line per criterion."""

from __future__ import annotations

import functools
import random
import time

import pytest
import zmq

import oracles
from kernelforge import calc, client as kfclient, protocol, registry, wire
from kernelforge.highlight import emit_mode, mode_from_keywords
from kernelforge.protocol import SessionState, dispatch
from kernelforge.registry import KernelDescriptor, generate_kernel_spec


def report(number: int, summary: str) -> None:
    print(f"\nACCEPTANCE {number:02d} PASS: {summary}")


def calc_state() -> SessionState:
    return SessionState(
        language=protocol.make_interpreter("calc"),
        info=registry.get_language("calc").info,
    )


def run_cell(state: SessionState, code: str, **fields):
    request = wire.WireMessage(
        header=wire.MessageHeader.new("execute_request", "acceptance", "tester"),
        content={"code": code, **fields},
    )
    return dispatch(request, state)


# -- criterion 1: first-contact session -----------------------------------------


def test_criterion_01_spawned_kernel_computes_one_plus_two():
    start = time.monotonic()
    with kfclient.spawn_kernel("calc") as session:
        result = session.exec_collect("1 + 2")
        elapsed = time.monotonic() - start
        assert result.status == "ok"
        assert result.execution_count == 1
        bundles = [c["data"] for t, c in result.trace if t == "execute_result"]
        assert bundles == [{"text/plain": "3"}]
        assert elapsed < 5.0
        session.shutdown()
    report(1, f'spawn + "1 + 2" -> {{"text/plain": "3"}}, count 1, ok, in {elapsed:.2f}s')


# -- criterion 2: assignment, reuse, and the show debugger ----------------------


def test_criterion_02_show_renders_the_expression_debugger():
    with kfclient.spawn_kernel("calc") as session:
        assert session.exec_collect("x = 2").outputs() == {"text/plain": "2"}
        assert session.exec_collect("y = 1 + x").outputs() == {"text/plain": "3"}
        result = session.exec_collect("show 2 * y")
        bundles = [c["data"] for t, c in result.trace if t == "execute_result"]
        assert len(bundles) == 1
        assert set(bundles[0]) == {"text/html"}
        html = bundles[0]["text/html"]
        for fragment in ("x: 2", "y: 3", "2 * y: 6"):
            assert fragment in html
        assert html.count('<input type="range"') == 2
        session.shutdown()
    report(2, 'x=2, y=1+x, show 2*y -> one text/html bundle, "x: 2"/"y: 3"/"2 * y: 6", two sliders')


# -- criterion 3: iopub ordering over the wire -----------------------------------


class RawFrontend:
    """Shell + iopub without any client-side filtering, so ordering and
    parentage are observed raw."""

    def __init__(self, conn: wire.ConnectionInfo):
        self.conn = conn
        self.ctx = zmq.Context()
        self.shell = self.ctx.socket(zmq.DEALER)
        self.shell.linger = 0
        self.shell.connect(conn.url(conn.shell_port))
        self.iopub = self.ctx.socket(zmq.SUB)
        self.iopub.linger = 0
        self.iopub.setsockopt(zmq.SUBSCRIBE, b"")
        self.iopub.connect(conn.url(conn.iopub_port))
        self.session = "raw-frontend"

    def close(self):
        self.shell.close(0)
        self.iopub.close(0)
        self.ctx.term()

    def request(self, msg_type: str, content: dict) -> wire.WireMessage:
        msg = wire.WireMessage(
            header=wire.MessageHeader.new(msg_type, self.session, "tester"),
            content=content,
        )
        self.shell.send_multipart(wire.encode(msg, self.conn.key))
        return msg

    def _recv(self, socket, deadline) -> wire.WireMessage | None:
        poller = zmq.Poller()
        poller.register(socket, zmq.POLLIN)
        while time.monotonic() < deadline:
            if poller.poll(20):
                return wire.verify(socket.recv_multipart(), self.conn.key)
        return None

    def warm_up(self):
        # Retry kernel_info until its idle arrives: proves the SUB joined.
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            request = self.request("kernel_info_request", {})
            self._recv(self.shell, time.monotonic() + 0.5)
            seen_idle = False
            until = time.monotonic() + 0.5
            while True:
                msg = self._recv(self.iopub, until)
                if msg is None:
                    break
                if (msg.parent_header and msg.parent_header.msg_id == request.header.msg_id
                        and msg.header.msg_type == "status"
                        and msg.content.get("execution_state") == "idle"):
                    seen_idle = True
                    break
            if seen_idle:
                return
        raise AssertionError("iopub subscription never became live")

    def execute_window(self, code: str) -> tuple[wire.WireMessage, list[wire.WireMessage]]:
        """Send one cell; return every iopub message up to and including
        its idle, with no filtering whatsoever."""
        request = self.request("execute_request", {"code": code, "silent": False})
        window: list[wire.WireMessage] = []
        deadline = time.monotonic() + 5
        while True:
            msg = self._recv(self.iopub, deadline)
            assert msg is not None, f"iopub went quiet mid-cell for {code!r}"
            window.append(msg)
            if (msg.header.msg_type == "status"
                    and msg.content.get("execution_state") == "idle"):
                break
        reply = self._recv(self.shell, time.monotonic() + 5)
        assert reply is not None and reply.parent_header.msg_id == request.header.msg_id
        return request, window


def random_cells(count: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    cells = []
    for _ in range(count):
        roll = rng.random()
        if roll < 0.15:
            cells.append(rng.choice(["1 + $", "x = ", "(1)", "1 -2", "q + 1"]))
        elif roll < 0.3:
            cells.append(f"show {rng.choice('xyz')} * {rng.randint(0, 9)}")
        elif roll < 0.6:
            cells.append(f"{rng.choice('xyz')} = {rng.randint(-50, 50)} + {rng.randint(0, 50)}")
        else:
            tokens = oracles.command_tokens(oracles.random_command(rng, depth=3))
            cells.append(oracles.render_with_random_spacing(tokens, rng))
    return cells


def test_criterion_03_iopub_order_over_fifty_randomized_cells(tmp_path):
    _, conn = kfclient.write_connection_file(tmp_path)
    state = calc_state()
    service = wire.run_channels(conn, functools.partial(dispatch, state=state))
    frontend = RawFrontend(conn)
    try:
        frontend.warm_up()
        # Pre-bind x so show cells can succeed sometimes.
        frontend.execute_window("x = 1")
        for code in random_cells(50, seed=3):
            request, window = frontend.execute_window(code)
            for msg in window:
                assert msg.parent_header == request.header, \
                    f"foreign parent inside the window of {code!r}"
            types = [m.header.msg_type for m in window]
            assert types[0] == "status" and window[0].content == {"execution_state": "busy"}
            assert types[1] == "execute_input"
            assert window[-1].content == {"execution_state": "idle"}
            assert all(t in ("execute_result", "error") for t in types[2:-1]), types
    finally:
        frontend.close()
        service.stop()
    report(3, "50 randomized cells: busy -> execute_input -> (result|error)* -> idle, parents correct")


# -- criterion 4: signature security ----------------------------------------------


def recorded_messages(key: bytes) -> list[list[bytes]]:
    """Genuine protocol traffic: requests, replies, and iopub messages
    produced by the real dispatcher, captured as encoded frame lists."""
    state = calc_state()
    frames = []
    for code in ("x = 2", "y = 1 + x", "show 2 * y", "1 + $", "x * y"):
        request = wire.WireMessage(
            header=wire.MessageHeader.new("execute_request", "recorded", "tester"),
            content={"code": code},
            identities=[b"frontend"],
        )
        frames.append(wire.encode(request, key))
        result = dispatch(request, state)
        frames.append(wire.encode(result.reply, key))
        frames.extend(wire.encode(m, key) for m in result.iopub)
    return frames


def test_criterion_04_one_thousand_single_byte_mutations_all_rejected():
    key = b"acceptance-signing-key"
    corpus = recorded_messages(key)
    for frames in corpus:
        wire.verify(frames, key)  # unmutated: accepted
    rng = random.Random(4)
    rejected = 0
    for _ in range(1000):
        frames = list(rng.choice(corpus))
        delim = frames.index(wire.DELIMITER)
        target = rng.randrange(delim + 2, delim + 6)  # header/parent/metadata/content
        offset = rng.randrange(len(frames[target]))
        old = frames[target][offset]
        new = rng.choice([b for b in range(256) if b != old])
        mutated = bytearray(frames[target])
        mutated[offset] = new
        frames[target] = bytes(mutated)
        with pytest.raises(wire.SignatureError):
            wire.verify(frames, key)
        rejected += 1
    assert rejected == 1000
    report(4, f"{rejected} single-byte mutations rejected, zero false accepts, originals accepted")


# -- criterion 5: heartbeat under load ---------------------------------------------


def test_criterion_05_hundred_pings_under_100ms_while_executing():
    import threading

    with kfclient.spawn_kernel("calc") as session:
        stop = threading.Event()
        failures: list[Exception] = []

        def hammer():
            with kfclient.connect(session.connection) as worker:  # second session, own sockets
                while not stop.is_set():
                    try:
                        worker.exec_collect("123456789 * 987654321 + 42")
                    except Exception as exc:  # surface in the main thread
                        failures.append(exc)
                        return

        thread = threading.Thread(target=hammer, daemon=True)
        thread.start()
        time.sleep(0.1)  # let cells start flowing
        try:
            latencies = [session.ping(timeout=2.0) for _ in range(100)]
        finally:
            stop.set()
            thread.join(timeout=10)
        assert not failures, failures
        assert len(latencies) == 100
        worst = max(latencies)
        assert worst < 0.1, f"slowest ping {worst * 1000:.1f}ms"
        session.shutdown()
    report(5, f"100 pings echoed byte-identically during execution; worst {worst * 1000:.2f}ms")


# -- criterion 6: kernel.json golden ------------------------------------------------


def test_criterion_06_kernel_spec_golden():
    import json

    spec = json.loads(generate_kernel_spec(
        KernelDescriptor(language_name="Calc", entry="calc"),
        "/usr/local/bin/kernelforge"))
    assert set(spec) == {"argv", "display_name", "language"}
    assert spec["display_name"] == "Calc"
    assert spec["language"] == "Calc"
    assert spec["argv"].count("{connection_file}") == 1
    report(6, 'kernel.json has exactly {argv, display_name: "Calc", language: "Calc"}, one placeholder')


# -- criterion 7: completion ----------------------------------------------------------


def test_criterion_07_completion_example_and_position_property():
    state = calc_state()
    for code in ("x = 1", "xy = 2", "y = 3"):
        run_cell(state, code)
    reply = dispatch(wire.WireMessage(
        header=wire.MessageHeader.new("complete_request", "acceptance", "tester"),
        content={"code": "1 + x", "cursor_pos": 5},
    ), state).reply.content
    assert reply["cursor_start"] == 4
    assert reply["cursor_end"] == 5
    assert reply["matches"] == ["x", "xy"]

    rng = random.Random(7)
    alphabet = "xy q1+*=Z"
    repl = state.language
    for _ in range(500):
        prefix = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))
        result = repl.complete_fragment(prefix, len(prefix))
        run = oracles.trailing_letter_run(prefix)
        assert result.position + len(run) == len(prefix), prefix
        assert result.suggestions == sorted(
            name for name in ("x", "xy", "y") if name.startswith(run))
    report(7, 'complete("1 + x", 5) -> start 4, ["x", "xy"]; position property held on 500 prefixes')


# -- criterion 8: parser/evaluator oracle equivalence -----------------------------------


def test_criterion_08_ten_thousand_commands_match_the_oracle():
    assert calc.parse_command("1 + 2 * 3") == calc.Eval(
        calc.Add(calc.Num(1), calc.Mul(calc.Num(2), calc.Num(3))))
    assert calc.evaluate(calc.parse_command("1 + 2 * 3").value, {}) == 7
    assert calc.parse_command("1 + 2 + 3") == calc.Eval(
        calc.Add(calc.Add(calc.Num(1), calc.Num(2)), calc.Num(3)))
    assert calc.parse_command("2 * 3 * 4") == calc.Eval(
        calc.Mul(calc.Mul(calc.Num(2), calc.Num(3)), calc.Num(4)))

    rng = random.Random(8)
    env = {"x": 2, "y": 3, "z": -7, "a": 1000, "bc": 0}
    for _ in range(10_000):
        command = oracles.random_command(rng, depth=5)
        text = oracles.render_with_random_spacing(oracles.command_tokens(command), rng)
        parsed = calc.parse_command(text)
        assert parsed == oracles.parse_command(text), text
        try:
            expected = oracles.run_command(parsed, env)
        except oracles.OracleEvalError as exc:
            with pytest.raises(calc.CalcEvalError) as err:
                calc.execute(parsed, env)
            assert str(err.value) == str(exc), text
        else:
            assert calc.execute(parsed, env) == expected, text
    report(8, "10000 random commands (depth <= 5): identical trees and values vs oracle")


# -- criterion 9: is_complete triage -------------------------------------------------


def test_criterion_09_is_complete_triage():
    state = calc_state()
    for code, expected in (("x =", "incomplete"), ("x = 2", "complete"),
                           ("$", "invalid"), ("", "complete")):
        content = dispatch(wire.WireMessage(
            header=wire.MessageHeader.new("is_complete_request", "acceptance", "tester"),
            content={"code": code},
        ), state).reply.content
        assert content["status"] == expected, code
    report(9, '"x =" incomplete, "x = 2" complete, "$" invalid, "" complete')


# -- criterion 10: mode emission golden ------------------------------------------------


def test_criterion_10_mode_emission_golden():
    mode = mode_from_keywords("Calc", calc.KEYWORDS)
    script = emit_mode(mode)
    number = script.index('/[0-9]+/, token: "number"')
    variable = script.index('/[a-zA-Z][a-zA-Z0-9_]*/, token: "variable"')
    assert number < variable
    assert script == emit_mode(mode_from_keywords("Calc", calc.KEYWORDS))
    report(10, "mode script has (number, variable) rules in order; emission deterministic")


# -- criterion 11: shutdown ------------------------------------------------------------


def test_criterion_11_control_shutdown_exits_within_five_seconds():
    session = kfclient.spawn_kernel("calc")
    try:
        assert session.exec_collect("x = 1").status == "ok"  # finished execution exists
        start = time.monotonic()
        reply = session.shutdown()
        elapsed = time.monotonic() - start
        assert reply == {"status": "ok", "restart": False}
        assert elapsed < 5.0
        assert session.process.returncode == 0  # exited, and not by a kill
    finally:
        session.close()
    report(11, f"shutdown_reply received and process exited cleanly in {elapsed:.2f}s")


# -- criterion 12: manual notebook session ----------------------------------------------


@pytest.mark.skip(reason="manual check: `kernelforge install --language calc`, then open "
                         "the Calc kernel in a running Jupyter and replay criteria 1-2")
def test_criterion_12_manual_notebook_session():
    pass
