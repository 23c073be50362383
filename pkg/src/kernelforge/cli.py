"""Command line interface.

    kernelforge install --language calc [--logo logo.png]
    kernelforge serve --connection-file /path/kernel.json --language calc
    kernelforge mode --language calc [--out Calc.mode.js]
    kernelforge dockerfile --language calc
    kernelforge doctor
    kernelforge client exec --connection-file /path/kernel.json --code "1 + 2"
    kernelforge client script --connection-file /path/kernel.json cells.calc
    kernelforge client spawn --language calc [--code "1 + 2"] [--script cells.calc]
"""

from __future__ import annotations

import argparse
import functools
import logging
import sys
from pathlib import Path

from . import client as client_mod
from . import protocol, registry, wire
from .highlight import emit_mode, mode_filename

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernelforge",
                                     description="DSL kernels for Jupyter")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    install = sub.add_parser("install", help="install a kernelspec")
    install.add_argument("--language", required=True)
    install.add_argument("--logo", type=Path, default=None,
                         help="64x64 PNG copied next to kernel.json")

    serve = sub.add_parser("serve", help="run a kernel (used by Jupyter)")
    serve.add_argument("--connection-file", required=True, type=Path)
    serve.add_argument("--language", required=True)

    mode = sub.add_parser("mode", help="emit the editor mode script")
    mode.add_argument("--language", required=True)
    mode.add_argument("--out", type=Path, default=None,
                      help="write here instead of stdout")

    docker = sub.add_parser("dockerfile", help="emit a shareable image recipe")
    docker.add_argument("--language", required=True)

    sub.add_parser("doctor", help="check whether kernels can run here")

    client = sub.add_parser("client", help="drive a kernel headlessly")
    csub = client.add_subparsers(dest="client_command", required=True)

    cexec = csub.add_parser("exec", help="execute one cell")
    cexec.add_argument("--connection-file", required=True, type=Path)
    cexec.add_argument("--code", required=True)

    cscript = csub.add_parser("script", help="run a newline-delimited cell script")
    cscript.add_argument("--connection-file", required=True, type=Path)
    cscript.add_argument("script", type=Path)

    cspawn = csub.add_parser("spawn", help="start a kernel, probe it, shut it down")
    cspawn.add_argument("--language", required=True)
    cspawn.add_argument("--code", default=None, help="also execute this cell")
    cspawn.add_argument("--script", type=Path, default=None,
                        help="also run this cell script")
    return parser


def _cmd_install(args: argparse.Namespace) -> int:
    language = registry.get_language(args.language)
    descriptor = language.descriptor()
    if args.logo is not None:
        descriptor = registry.KernelDescriptor(
            language_name=descriptor.language_name,
            entry=descriptor.entry,
            logo_path=args.logo,
            display_name=descriptor.display_name,
        )
    target = registry.install_kernel(descriptor)
    print(f"installed {descriptor.effective_display_name} kernel into {target}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    conn = wire.parse_connection_file(args.connection_file)
    language = registry.get_language(args.language)
    state = protocol.SessionState(
        language=protocol.make_interpreter(args.language),
        info=language.info,
    )
    service = wire.run_channels(conn, functools.partial(protocol.dispatch, state=state))
    log.info("kernel for %s listening on %s", language.language_name, conn.ip)
    try:
        service.wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


def _cmd_mode(args: argparse.Namespace) -> int:
    language = registry.get_language(args.language)
    mode = language.highlight_mode()
    script = emit_mode(mode)
    if args.out is None:
        sys.stdout.write(script)
    else:
        out = args.out if args.out.suffix else args.out / mode_filename(mode)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(script, encoding="utf-8")
        print(f"wrote {out}")
    return 0


def _cmd_dockerfile(args: argparse.Namespace) -> int:
    language = registry.get_language(args.language)
    sys.stdout.write(registry.emit_dockerfile(language.descriptor()))
    return 0


def _cmd_doctor(args: argparse.Namespace) -> int:
    checks = registry.verify_environment()
    for check in checks:
        print(f"{'ok  ' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    return 0 if registry.environment_ok(checks) else 1


def _print_execution(result: client_mod.CollectedExecution) -> None:
    outputs = result.outputs()
    if "text/plain" in outputs:
        print(outputs["text/plain"])
    else:
        for mime, data in sorted(outputs.items()):
            print(f"({mime}) {data}")
    for error in result.errors():
        print(f"error: {error.get('evalue', '')}", file=sys.stderr)


def _cmd_client_exec(args: argparse.Namespace) -> int:
    conn = wire.parse_connection_file(args.connection_file)
    with client_mod.connect(conn) as session:
        result = session.exec_collect(args.code)
        _print_execution(result)
        return 0 if result.status == "ok" else 1


def _cmd_client_script(args: argparse.Namespace) -> int:
    conn = wire.parse_connection_file(args.connection_file)
    with client_mod.connect(conn) as session:
        transcript, errored = session.run_script(args.script)
        sys.stdout.write(transcript)
        return 1 if errored else 0


def _cmd_client_spawn(args: argparse.Namespace) -> int:
    status = 0
    with client_mod.spawn_kernel(args.language) as session:
        info = session.kernel_info()
        name = info.get("language_info", {}).get("name", args.language)
        print(f"spawned {name} kernel (connection file {session.connection_file})")
        if args.code is not None:
            result = session.exec_collect(args.code)
            _print_execution(result)
            if result.status != "ok":
                status = 1
        if args.script is not None:
            transcript, errored = session.run_script(args.script)
            sys.stdout.write(transcript)
            if errored:
                status = 1
        session.shutdown()
        print("kernel shut down cleanly")
    return status


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "install":
            return _cmd_install(args)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "mode":
            return _cmd_mode(args)
        if args.command == "dockerfile":
            return _cmd_dockerfile(args)
        if args.command == "doctor":
            return _cmd_doctor(args)
        if args.command == "client":
            if args.client_command == "exec":
                return _cmd_client_exec(args)
            if args.client_command == "script":
                return _cmd_client_script(args)
            if args.client_command == "spawn":
                return _cmd_client_spawn(args)
        raise AssertionError(f"unhandled command {args.command}")
    except (wire.WireError, registry.RegistryError, client_mod.ClientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
