"""Declarative syntax highlighting modes, emitted as CodeMirror scripts.

A mode is a tiny state machine: named states, each an ordered list of
regex rules that map matches to token classes.  The notebook frontend
consumes it through CodeMirror's simple-mode addon, but the data model
stays editor-neutral so other targets can reuse it.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

# Token classes CodeMirror themes style out of the box.  Others are
# emitted as-is with a warning so custom themes can pick them up.
KNOWN_TOKEN_CLASSES = frozenset({
    "atom", "attribute", "bracket", "builtin", "comment", "def", "error",
    "keyword", "meta", "number", "operator", "property", "punctuation",
    "qualifier", "string", "string-2", "tag", "variable", "variable-2",
    "variable-3",
})


class ModeError(Exception):
    """The mode is structurally invalid and cannot be emitted."""


@dataclass
class Rule:
    """One lexer rule: a regex, the token class(es) it produces, and
    optional state transition or indentation effects."""

    regex: str
    tokens: list[str]
    next: str | None = None
    indent: bool = False
    dedent: bool = False


@dataclass
class State:
    name: str
    rules: list[Rule] = field(default_factory=list)


@dataclass
class Mode:
    name: str
    states: list[State] = field(default_factory=list)


def validate_mode(mode: Mode) -> None:
    """Reject structurally broken modes, naming the offending rule."""
    if not mode.name:
        raise ModeError("mode needs a name")
    if not mode.states:
        raise ModeError(f"mode {mode.name!r} has no states")
    names = [s.name for s in mode.states]
    if len(set(names)) != len(names):
        raise ModeError(f"mode {mode.name!r} has duplicate state names: {names}")
    for state in mode.states:
        for i, rule in enumerate(state.rules):
            where = f"state {state.name!r} rule {i}"
            if not rule.tokens:
                raise ModeError(f"{where}: no token class")
            try:
                re.compile(rule.regex)
            except re.error as exc:
                raise ModeError(f"{where}: regex {rule.regex!r} does not compile: {exc}")
            if rule.next is not None and rule.next not in names:
                raise ModeError(f"{where}: next state {rule.next!r} does not exist")
            for token in rule.tokens:
                if token not in KNOWN_TOKEN_CLASSES:
                    log.warning("%s: unknown token class %r passed through", where, token)


def mode_from_keywords(name: str, keywords: set[str] | frozenset[str]) -> Mode:
    """Generic single-state mode: keywords, then numbers, then identifiers.

    Longer keywords are matched first so a keyword that prefixes another
    ("if" / "iff") never shadows it.
    """
    rules = []
    words = sorted(keywords, key=lambda w: (-len(w), w))
    if words:
        alternation = "|".join(re.escape(w) for w in words)
        rules.append(Rule(regex=rf"\b(?:{alternation})\b", tokens=["keyword"]))
    rules.append(Rule(regex="[0-9]+", tokens=["number"]))
    rules.append(Rule(regex="[a-zA-Z][a-zA-Z0-9_]*", tokens=["variable"]))
    return Mode(name=name, states=[State(name="ini", rules=rules)])


def _js_regex(pattern: str) -> str:
    # Escape bare forward slashes; they would close the JS regex literal.
    escaped = re.sub(r"(?<!\\)/", r"\\/", pattern)
    return f"/{escaped}/"


def _js_rule(rule: Rule, state_names: dict[str, str]) -> str:
    parts = [f"regex: {_js_regex(rule.regex)}"]
    if len(rule.tokens) == 1:
        parts.append(f"token: {json.dumps(rule.tokens[0])}")
    else:
        parts.append(f"token: {json.dumps(rule.tokens)}")
    if rule.next is not None:
        parts.append(f"next: {json.dumps(state_names[rule.next])}")
    if rule.indent:
        parts.append("indent: true")
    if rule.dedent:
        parts.append("dedent: true")
    return "{" + ", ".join(parts) + "}"


def emit_mode(mode: Mode) -> str:
    """Compile a mode to a CodeMirror defineSimpleMode script.

    Emission is deterministic and preserves rule order exactly; rule
    order is the tie-breaker between overlapping regexes.  The first
    state becomes "start", which simple-mode requires.
    """
    validate_mode(mode)
    state_names = {s.name: s.name for s in mode.states}
    state_names[mode.states[0].name] = "start"
    lines = [f"CodeMirror.defineSimpleMode({json.dumps(mode.name)}, {{"]
    for state in mode.states:
        lines.append(f"  {json.dumps(state_names[state.name])}: [")
        for rule in state.rules:
            lines.append(f"    {_js_rule(rule, state_names)},")
        lines.append("  ],")
    lines.append("});")
    return "\n".join(lines) + "\n"


def mode_filename(mode: Mode) -> str:
    return f"{mode.name}.mode.js"
