"""Client behaviour against a live in-process kernel service."""

from __future__ import annotations

import time

import pytest
import zmq

from kernelforge import client as kfclient
from kernelforge import wire
from kernelforge.client import KernelUnreachable, connect, pick_ports, write_connection_file


def trace_types(result):
    return [t for t, _ in result.trace]


class TestConnect:
    def test_heartbeat_and_readiness(self, calc_session):
        assert calc_session.ping() < 1.0

    def test_unreachable_kernel(self, tmp_path):
        _, conn = write_connection_file(tmp_path)  # nothing listening
        start = time.monotonic()
        with pytest.raises(KernelUnreachable, match="unreachable"):
            connect(conn, timeout=0.5)
        assert time.monotonic() - start < 5

    def test_pick_ports_are_distinct(self):
        ports = pick_ports(5)
        assert len(set(ports)) == 5


class TestExecCollect:
    def test_successful_cell(self, calc_session):
        result = calc_session.exec_collect("1 + 2")
        assert result.status == "ok"
        assert result.execution_count == 1
        assert result.outputs() == {"text/plain": "3"}
        assert trace_types(result) == ["status", "execute_input", "execute_result", "status"]
        assert result.trace[0][1] == {"execution_state": "busy"}
        assert result.trace[-1][1] == {"execution_state": "idle"}

    def test_error_cell(self, calc_session):
        result = calc_session.exec_collect("1 + $")
        assert result.status == "error"
        assert result.outputs() == {}
        (error,) = result.errors()
        assert error["ename"] == "DSLError"
        assert error["evalue"] == "Parse error"

    def test_silent_cell(self, calc_session):
        result = calc_session.exec_collect("x = 1", silent=True)
        assert result.status == "ok"
        assert trace_types(result) == ["status", "status"]

    def test_state_persists_between_cells(self, calc_session):
        calc_session.exec_collect("x = 2")
        calc_session.exec_collect("y = 1 + x")
        result = calc_session.exec_collect("show 2 * y")
        html = result.outputs()["text/html"]
        for fragment in ("x: 2", "y: 3", "2 * y: 6"):
            assert fragment in html
        assert html.count('type="range"') == 2

    def test_sessions_share_the_kernel_but_not_their_traffic(self, live_kernel):
        conn, _, _ = live_kernel
        with connect(conn) as one, connect(conn) as two:
            first = one.exec_collect("a = 1")
            second = two.exec_collect("b = 2")
            third = one.exec_collect("a + b")
        assert [first.execution_count, second.execution_count,
                third.execution_count] == [1, 2, 3]
        assert third.outputs() == {"text/plain": "3"}
        # every trace is exactly one cell's worth: nothing leaked across
        for result in (first, second, third):
            assert trace_types(result) == [
                "status", "execute_input", "execute_result", "status"]


class TestSmallRequests:
    def test_kernel_info(self, calc_session):
        info = calc_session.kernel_info()
        assert info["language_info"]["name"] == "Calc"
        assert info["protocol_version"] == "5.3"

    def test_complete(self, calc_session):
        calc_session.exec_collect("x = 1")
        calc_session.exec_collect("xy = 2")
        reply = calc_session.complete("1 + x", 5)
        assert reply["matches"] == ["x", "xy"]
        assert reply["cursor_start"] == 4
        assert reply["cursor_end"] == 5


class TestRunScript:
    def test_transcript_and_exit_flag(self, calc_session, tmp_path):
        script = tmp_path / "cells.calc"
        script.write_text("x = 2\n1 + x\n\nbad $$\n")
        transcript, errored = calc_session.run_script(script)
        assert errored is True
        assert transcript.splitlines() == [
            "In [1]: x = 2",
            "Out[1]: 2",
            "In [2]: 1 + x",
            "Out[2]: 3",
            "In [3]: bad $$",
            "Err[3]: Parse error",
        ]

    def test_clean_script(self, calc_session, tmp_path):
        script = tmp_path / "cells.calc"
        script.write_text("1 + 1\n")
        transcript, errored = calc_session.run_script(script)
        assert errored is False
        assert "Out[1]: 2" in transcript


class TestHostileTraffic:
    def send_raw(self, conn, frames):
        ctx = zmq.Context()
        sock = ctx.socket(zmq.DEALER)
        sock.linger = 0
        sock.connect(conn.url(conn.shell_port))
        poller = zmq.Poller()
        poller.register(sock, zmq.POLLIN)
        try:
            sock.send_multipart(frames)
            return sock.recv_multipart() if poller.poll(300) else None
        finally:
            sock.close(0)
            ctx.term()

    def test_unknown_message_type_gets_no_answer(self, live_kernel, calc_session):
        conn, _, _ = live_kernel
        msg = wire.WireMessage(
            header=wire.MessageHeader.new("bogus_request", "s", "u"),
            content={},
        )
        assert self.send_raw(conn, wire.encode(msg, conn.key)) is None
        assert calc_session.exec_collect("1 + 1").status == "ok"  # still alive

    def test_tampered_signature_is_dropped(self, live_kernel, calc_session):
        conn, _, _ = live_kernel
        msg = wire.WireMessage(
            header=wire.MessageHeader.new("execute_request", "s", "u"),
            content={"code": "1 + 1"},
        )
        frames = wire.encode(msg, conn.key)
        frames[-1] = frames[-1][:-1] + b"!"
        assert self.send_raw(conn, frames) is None
        assert calc_session.exec_collect("2 + 2").status == "ok"

    def test_garbage_frames_are_dropped(self, live_kernel, calc_session):
        conn, _, _ = live_kernel
        assert self.send_raw(conn, [b"junk", b"more junk"]) is None
        assert calc_session.exec_collect("3 + 3").status == "ok"


class TestShutdown:
    def test_control_shutdown_stops_the_service(self, live_kernel):
        conn, state, service = live_kernel
        session = connect(conn)
        try:
            reply = session.shutdown()
            assert reply == {"status": "ok", "restart": False}
            assert service.wait(timeout=5) is True
            assert state.shutdown_requested is True
        finally:
            session.close()

    def test_restart_flag_is_echoed(self, live_kernel):
        conn, _, _ = live_kernel
        with connect(conn) as session:
            assert session.shutdown(restart=True)["restart"] is True
