from __future__ import annotations

import functools
import os
import stat
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make `oracles` importable

from kernelforge import client as kfclient
from kernelforge import protocol, registry, wire


def make_request(msg_type: str, content: dict | None = None,
                 session: str = "test-session") -> wire.WireMessage:
    return wire.WireMessage(
        header=wire.MessageHeader.new(msg_type, session, "tester"),
        content=content or {},
        identities=[b"frontend"],
    )


@pytest.fixture
def calc_state() -> protocol.SessionState:
    return protocol.SessionState(
        language=protocol.make_interpreter("calc"),
        info=registry.get_language("calc").info,
    )


@pytest.fixture
def fake_jupyter(tmp_path, monkeypatch):
    """A `jupyter` executable on PATH that pretends to be a notebook server."""
    bindir = tmp_path / "fake-bin"
    bindir.mkdir()
    shim = bindir / "jupyter"
    shim.write_text(
        "#!/bin/sh\n"
        'echo "The notebook is running at http://127.0.0.1:8888/"\n'
        "trap 'exit 0' TERM INT\n"
        "while true; do sleep 0.1; done\n"
    )
    shim.chmod(shim.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    monkeypatch.setenv("PATH", f"{bindir}:{os.environ.get('PATH', '')}")
    return shim


@pytest.fixture
def kernel_dir(tmp_path, monkeypatch):
    target = tmp_path / "kernels"
    monkeypatch.setenv(registry.KERNEL_DIR_ENV, str(target))
    return target


@pytest.fixture
def live_kernel(tmp_path):
    """An in-process calc kernel service plus its connection info."""
    _, conn = kfclient.write_connection_file(tmp_path)
    state = protocol.SessionState(
        language=protocol.make_interpreter("calc"),
        info=registry.get_language("calc").info,
    )
    service = wire.run_channels(conn, functools.partial(protocol.dispatch, state=state))
    try:
        yield conn, state, service
    finally:
        service.stop()


@pytest.fixture
def calc_session(live_kernel):
    conn, _, _ = live_kernel
    session = kfclient.connect(conn)
    try:
        yield session
    finally:
        session.close()
