"""CALC: the built-in example language.

Commands are single assignments, bare expressions, or `show` commands::

    x = 2
    1 + 2 * x
    show 2 * x

Expressions are integer arithmetic over `+` and `*` (no subtraction, no
parentheses; `*` binds tighter, both associate left).  Values live in the
signed 64-bit range.  `show` renders an expression debugger as HTML
instead of printing the value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .protocol import (
    COMPLETE,
    INCOMPLETE,
    INVALID,
    CompletionResult,
    Diagnostic,
    ExecutionResult,
    ReplDefinition,
    SourceSpan,
)

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

KEYWORDS = frozenset({"show"})

Environment = dict[str, int]


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Add:
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Mul:
    left: "Expression"
    right: "Expression"


Expression = Union[Num, Var, Add, Mul]


@dataclass(frozen=True)
class Assign:
    name: str
    value: Expression


@dataclass(frozen=True)
class Eval:
    value: Expression


@dataclass(frozen=True)
class Show:
    value: Expression


Command = Union[Assign, Eval, Show]


class CalcParseError(Exception):
    """Syntax error with its offset; `at_end` distinguishes truncated
    input (more text could fix it) from an error in the middle."""

    def __init__(self, message: str, position: int, at_end: bool):
        super().__init__(message)
        self.message = message
        self.position = position
        self.at_end = at_end


class CalcEvalError(Exception):
    pass


# -- scanner -----------------------------------------------------------------

@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "id", "show", "+", "*", "="
    text: str
    pos: int


_NUM_RE = re.compile(r"-?[0-9]+")
_ID_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9_]*")


def _scan(text: str) -> list[_Token]:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if m := _NUM_RE.match(text, i):
            tokens.append(_Token("num", m.group(), i))
            i = m.end()
        elif m := _ID_RE.match(text, i):
            word = m.group()
            tokens.append(_Token("show" if word == "show" else "id", word, i))
            i = m.end()
        elif ch in "+*=":
            tokens.append(_Token(ch, ch, i))
            i += 1
        else:
            raise CalcParseError(f"unexpected character {ch!r}", i, at_end=False)
    return tokens


# -- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _scan(text)
        self.i = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise CalcParseError("unexpected end of input", len(self.text), at_end=True)
        self.i += 1
        return tok

    def command(self) -> Command:
        tok = self.peek()
        if tok is None:
            raise CalcParseError("expected a command", len(self.text), at_end=True)
        if tok.kind == "show":
            self.next()
            cmd: Command = Show(self.expression())
        elif tok.kind == "id" and self.i + 1 < len(self.tokens) \
                and self.tokens[self.i + 1].kind == "=":
            self.next()
            self.next()
            cmd = Assign(tok.text, self.expression())
        else:
            cmd = Eval(self.expression())
        trailing = self.peek()
        if trailing is not None:
            raise CalcParseError(f"unexpected {trailing.text!r} after command",
                                 trailing.pos, at_end=False)
        return cmd

    def expression(self) -> Expression:
        node = self.term()
        while (tok := self.peek()) is not None and tok.kind == "+":
            self.next()
            node = Add(node, self.term())
        return node

    def term(self) -> Expression:
        node = self.atom()
        while (tok := self.peek()) is not None and tok.kind == "*":
            self.next()
            node = Mul(node, self.atom())
        return node

    def atom(self) -> Expression:
        tok = self.peek()
        if tok is None:
            raise CalcParseError("expected an expression", len(self.text), at_end=True)
        if tok.kind == "num":
            self.next()
            return Num(int(tok.text))
        if tok.kind == "id":
            self.next()
            return Var(tok.text)
        raise CalcParseError(f"expected an expression, found {tok.text!r}",
                             tok.pos, at_end=False)


def parse_command(text: str) -> Command:
    """Parse one command.  Raises :class:`CalcParseError` on bad input."""
    return _Parser(text).command()


# -- evaluation --------------------------------------------------------------

def _check64(value: int) -> int:
    if not INT64_MIN <= value <= INT64_MAX:
        raise CalcEvalError("Arithmetic overflow")
    return value


def evaluate(expr: Expression, env: Environment) -> int:
    match expr:
        case Num(value):
            return _check64(value)
        case Var(name):
            if name not in env:
                raise CalcEvalError(f"Undefined variable {name}")
            return env[name]
        case Add(left, right):
            return _check64(evaluate(left, env) + evaluate(right, env))
        case Mul(left, right):
            return _check64(evaluate(left, env) * evaluate(right, env))
    raise TypeError(f"not an expression: {expr!r}")


def execute(cmd: Command, env: Environment) -> tuple[int, Environment]:
    """Evaluate a command against `env`; returns the value and the
    (possibly extended) environment.  `env` itself is never mutated."""
    match cmd:
        case Assign(name, expr):
            value = evaluate(expr, env)
            return value, {**env, name: value}
        case Eval(expr) | Show(expr):
            return evaluate(expr, env), env
    raise TypeError(f"not a command: {cmd!r}")


# -- rendering ---------------------------------------------------------------

_PRECEDENCE = {Add: 1, Mul: 2}


def render_expression(expr: Expression) -> str:
    """Canonical text: single spaces around operators, parentheses only
    where precedence or associativity requires them."""

    def go(node: Expression, min_prec: int) -> str:
        match node:
            case Num(value):
                return str(value)
            case Var(name):
                return name
            case Add(left, right) | Mul(left, right):
                prec = _PRECEDENCE[type(node)]
                op = "+" if isinstance(node, Add) else "*"
                text = f"{go(left, prec)} {op} {go(right, prec + 1)}"
                return f"({text})" if prec < min_prec else text
        raise TypeError(f"not an expression: {node!r}")

    return go(expr, 0)


def render_debugger(expr: Expression, env: Environment) -> str:
    """HTML inspector for `show`: each variable with a slider initialised
    to its value, then the expression and its current value."""
    value = evaluate(expr, env)
    lines = ['<div class="expression-debugger">']
    for name in sorted(env):
        lines.append(
            f'<div>{name}: {env[name]} <input type="range" value="{env[name]}"/></div>'
        )
    lines.append(f"<div>{render_expression(expr)}: {value}</div>")
    lines.append("</div>")
    return "\n".join(lines)


# -- REPL definition ---------------------------------------------------------

_TRAILING_LETTERS = re.compile(r"[a-zA-Z]*$")


def is_complete(text: str) -> str:
    """Completeness triage for the console: blank and parseable input is
    complete, input that failed at end-of-text just needs more."""
    if not text.strip():
        return COMPLETE
    try:
        parse_command(text)
    except CalcParseError as exc:
        return INCOMPLETE if exc.at_end else INVALID
    return COMPLETE


def make_repl() -> ReplDefinition:
    """A fresh CALC session: empty environment, persistent across cells."""
    env: Environment = {}

    def handler(line: str) -> ExecutionResult:
        nonlocal env
        try:
            cmd = parse_command(line)
        except CalcParseError as exc:
            span = SourceSpan.at(line, exc.position)
            return ExecutionResult(diagnostics=[Diagnostic("Parse error", span)])
        try:
            if isinstance(cmd, Show):
                return ExecutionResult(outputs={"text/html": render_debugger(cmd.value, env)})
            value, env = execute(cmd, env)
        except CalcEvalError as exc:
            return ExecutionResult(diagnostics=[Diagnostic(str(exc))])
        return ExecutionResult(outputs={"text/plain": str(value)})

    def completor(prefix: str) -> CompletionResult:
        partial = _TRAILING_LETTERS.search(prefix).group()
        position = len(prefix) - len(partial)
        suggestions = sorted(name for name in env if name.startswith(partial))
        return CompletionResult(position=position, suggestions=suggestions)

    return ReplDefinition(handler=handler, completor=completor,
                          is_complete=is_complete, prompt="calc>")


def _register() -> None:
    from . import registry
    from .protocol import LanguageInfo

    registry.register_language(registry.LanguageEntry(
        entry="calc",
        language_name="Calc",
        factory=make_repl,
        keywords=KEYWORDS,
        info=LanguageInfo(
            name="Calc",
            version="1.0",
            mimetype="text/x-calc",
            file_extension=".calc",
            codemirror_mode="Calc",
            banner="Calc: integer arithmetic with variables and show",
        ),
    ))


_register()
