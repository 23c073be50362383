"""Kernel registration: kernelspec files, installation, environment checks.

Jupyter discovers kernels through `kernel.json` files in per-kernel
directories.  This module generates those specs, installs them (plus the
language's logo and editor mode), and can host a notebook server for
manual use.  `KERNELFORGE_KERNEL_DIR` overrides the target directory so
sandboxes and tests never touch a real Jupyter installation.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .highlight import Mode, emit_mode, mode_filename, mode_from_keywords
from .protocol import LanguageInfo, ReplDefinition

log = logging.getLogger(__name__)

KERNEL_DIR_ENV = "KERNELFORGE_KERNEL_DIR"

CONNECTION_FILE_PLACEHOLDER = "{connection_file}"

_SLUG_OK = re.compile(r"^[a-z0-9_-]+$")


class RegistryError(Exception):
    pass


class UnknownLanguageError(RegistryError, LookupError):
    pass


class InstallError(RegistryError):
    pass


@dataclass(frozen=True)
class KernelDescriptor:
    """Everything needed to describe one installable kernel."""

    language_name: str
    entry: str
    logo_path: Path | None = None
    display_name: str = ""

    def __post_init__(self) -> None:
        if not self.language_name:
            raise RegistryError("language_name must be nonempty")
        if not self.entry:
            raise RegistryError("entry must be nonempty")

    @property
    def effective_display_name(self) -> str:
        return self.display_name or self.language_name


@dataclass
class LanguageEntry:
    """A language known to this process: its factory plus metadata."""

    entry: str
    language_name: str
    factory: Callable[[], ReplDefinition]
    info: LanguageInfo
    keywords: frozenset[str] = frozenset()
    mode: Mode | None = None
    display_name: str = ""
    logo_path: Path | None = None

    def descriptor(self) -> KernelDescriptor:
        return KernelDescriptor(
            language_name=self.language_name,
            entry=self.entry,
            logo_path=self.logo_path,
            display_name=self.display_name,
        )

    def highlight_mode(self) -> Mode:
        return self.mode or mode_from_keywords(self.language_name, self.keywords)


_LANGUAGES: dict[str, LanguageEntry] = {}


def register_language(entry: LanguageEntry) -> None:
    if entry.entry in _LANGUAGES:
        log.debug("re-registering language %r", entry.entry)
    _LANGUAGES[entry.entry] = entry


def _ensure_builtins() -> None:
    # The built-in language registers itself on import.
    from . import calc  # noqa: F401


def available_languages() -> list[str]:
    _ensure_builtins()
    return sorted(_LANGUAGES)


def get_language(entry: str) -> LanguageEntry:
    _ensure_builtins()
    try:
        return _LANGUAGES[entry]
    except KeyError:
        known = ", ".join(available_languages()) or "none"
        raise UnknownLanguageError(
            f"unknown language {entry!r}; registered languages: {known}"
        ) from None


def slug(name: str) -> str:
    """Directory-safe kernel name: lowercase, [a-z0-9_-] only."""
    cleaned = re.sub(r"[^a-z0-9_-]+", "-", name.lower()).strip("-")
    if not cleaned:
        raise RegistryError(f"cannot derive a kernel directory name from {name!r}")
    assert _SLUG_OK.match(cleaned)
    return cleaned


def generate_kernel_spec(descriptor: KernelDescriptor, launcher: str | Path) -> str:
    """The kernel.json text Jupyter uses to start this kernel.

    The frontend substitutes {connection_file} at launch time, so it must
    survive verbatim.  The key set is fixed; extra keys would be carried
    into every notebook's metadata.
    """
    launcher = Path(launcher)
    if not launcher.is_absolute():
        raise RegistryError(f"launcher path must be absolute, got {launcher}")
    spec = {
        "argv": [
            str(launcher),
            "serve",
            "--connection-file",
            CONNECTION_FILE_PLACEHOLDER,
            "--language",
            descriptor.entry,
        ],
        "display_name": descriptor.effective_display_name,
        "language": descriptor.language_name,
    }
    return json.dumps(spec, indent=2) + "\n"


def default_kernel_dir() -> Path:
    override = os.environ.get(KERNEL_DIR_ENV)
    if override:
        return Path(override)
    data_dir = os.environ.get("JUPYTER_DATA_DIR")
    if data_dir:
        return Path(data_dir) / "kernels"
    if sys.platform == "darwin":
        return Path.home() / "Library" / "Jupyter" / "kernels"
    if os.name == "nt":
        appdata = os.environ.get("APPDATA", str(Path.home()))
        return Path(appdata) / "jupyter" / "kernels"
    xdg = os.environ.get("XDG_DATA_HOME", str(Path.home() / ".local" / "share"))
    return Path(xdg) / "jupyter" / "kernels"


@dataclass
class EnvironmentCheck:
    name: str
    passed: bool
    detail: str


def verify_environment(kernel_dir: Path | None = None) -> list[EnvironmentCheck]:
    """Report whether kernels can be installed and served here.

    Report-only: callers decide what a failure means.  install_kernel
    refuses to run when any check fails; `doctor` just prints them.
    """
    checks = []
    jupyter = shutil.which("jupyter")
    checks.append(EnvironmentCheck(
        name="jupyter launcher",
        passed=jupyter is not None,
        detail=jupyter or "no `jupyter` executable on PATH",
    ))
    target = kernel_dir or default_kernel_dir()
    probe = target
    while not probe.exists() and probe.parent != probe:
        probe = probe.parent
    writable = probe.is_dir() and os.access(probe, os.W_OK)
    checks.append(EnvironmentCheck(
        name="kernels directory",
        passed=writable,
        detail=f"{target} ({'writable' if writable else f'not writable, nearest existing path {probe}'})",
    ))
    return checks


def environment_ok(checks: list[EnvironmentCheck]) -> bool:
    return all(c.passed for c in checks)


def _resolve_launcher() -> Path:
    found = shutil.which("kernelforge")
    if found:
        return Path(found).resolve()
    # Running from a source tree without the console script installed.
    return Path(sys.argv[0]).resolve()


def install_kernel(descriptor: KernelDescriptor, spec_text: str | None = None,
                   kernel_dir: Path | None = None,
                   launcher: str | Path | None = None) -> Path:
    """Write kernel.json (plus logo and editor mode) into the kernels dir.

    A caller holding pre-rendered spec text can pass it in; otherwise the
    spec is generated from the descriptor.  Installation is idempotent:
    the written kernel.json reads back byte-identical and a second
    install just overwrites it.
    """
    checks = verify_environment(kernel_dir)
    if not environment_ok(checks):
        failed = "; ".join(f"{c.name}: {c.detail}" for c in checks if not c.passed)
        raise InstallError(f"environment not ready ({failed}); run `kernelforge doctor`")
    target = (kernel_dir or default_kernel_dir()) / slug(descriptor.language_name)
    target.mkdir(parents=True, exist_ok=True)
    if spec_text is None:
        spec_text = generate_kernel_spec(descriptor, launcher or _resolve_launcher())
    (target / "kernel.json").write_text(spec_text, encoding="utf-8")
    if descriptor.logo_path is not None:
        shutil.copyfile(descriptor.logo_path, target / "logo-64x64.png")
    _ensure_builtins()
    if descriptor.entry in _LANGUAGES:
        mode = _LANGUAGES[descriptor.entry].highlight_mode()
        (target / mode_filename(mode)).write_text(emit_mode(mode), encoding="utf-8")
    log.info("installed kernel %s into %s", descriptor.language_name, target)
    return target


def emit_dockerfile(descriptor: KernelDescriptor) -> str:
    """A self-contained image recipe for sharing the kernel.

    Generated for reproducibility documentation; nothing in this package
    builds or runs it.
    """
    name = descriptor.language_name
    return "\n".join([
        "FROM python:3.10-slim",
        "",
        f"# Jupyter kernel image for {name}",
        "RUN pip install --no-cache-dir notebook kernelforge",
        f"RUN kernelforge install --language {descriptor.entry}",
        "",
        "EXPOSE 8888",
        'CMD ["jupyter", "notebook", "--ip=0.0.0.0", "--port=8888", "--no-browser", "--allow-root"]',
    ]) + "\n"


@dataclass
class NotebookHandle:
    """Control surface for a hosted notebook server: three actions."""

    serve: Callable[[], None]
    stop: Callable[[], None]
    logs: Callable[..., None]


def serve_notebook(descriptor: KernelDescriptor, port: int = 8888) -> NotebookHandle:
    """Host a notebook server with the descriptor's kernel installed.

    Requires a working environment; errors point at verify_environment
    (the `doctor` command) rather than failing later inside Jupyter.
    """
    checks = verify_environment()
    if not environment_ok(checks):
        failed = "; ".join(f"{c.name}: {c.detail}" for c in checks if not c.passed)
        raise RegistryError(
            f"environment not ready ({failed}); run `kernelforge doctor`"
        )
    install_kernel(descriptor)
    state: dict = {"proc": None}

    def serve() -> None:
        if state["proc"] is not None and state["proc"].poll() is None:
            return
        state["proc"] = subprocess.Popen(
            ["jupyter", "notebook", f"--port={port}", "--no-browser"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        )
        log.info("notebook server for %s starting on port %d",
                 descriptor.language_name, port)

    def stop() -> None:
        proc = state["proc"]
        if proc is None or proc.poll() is not None:
            return
        proc.terminate()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout=5)

    def logs(sink: Callable[[str], None] | None = None) -> None:
        # Relays server output on a daemon thread until the server exits.
        proc = state["proc"]
        if proc is None or proc.stdout is None:
            return
        emit = sink or (lambda line: log.info("notebook: %s", line))

        def pump() -> None:
            for line in proc.stdout:
                emit(line.rstrip("\n"))

        threading.Thread(target=pump, name="kf-notebook-logs", daemon=True).start()

    return NotebookHandle(serve=serve, stop=stop, logs=logs)
