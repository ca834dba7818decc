"""A small arithmetic-expression evaluator for coefficient fields.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | atom
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Names are ``x``, ``y``, user constants, and ``pi``; functions are ``sin``,
``cos`` and ``exp``.  Parsed expressions evaluate elementwise on numpy arrays.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ExpressionError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/()]))"
)
_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
}


def tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


# AST nodes are tuples: ("num", v) ("var", name) ("neg", e) ("bin", op, l, r) ("call", f, e)
class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            raise ExpressionError(f"expected {value or 'token'}, got {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.i != len(self.tokens):
            raise ExpressionError(f"trailing input at token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return ("neg", self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.atom()

    def atom(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            return ("num", float(val))
        if kind == "name":
            self.take()
            if self.peek()[1] == "(":
                if val not in _FUNCS:
                    raise ExpressionError(f"unknown function {val!r}")
                self.take("(")
                arg = self.expr()
                self.take(")")
                return ("call", val, arg)
            return ("var", val)
        if val == "(":
            self.take("(")
            node = self.expr()
            self.take(")")
            return node
        raise ExpressionError(f"unexpected token {val!r}")


def _names(node, out):
    tag = node[0]
    if tag == "var":
        out.add(node[1])
    elif tag == "neg":
        _names(node[1], out)
    elif tag == "bin":
        _names(node[2], out)
        _names(node[3], out)
    elif tag == "call":
        _names(node[2], out)
    return out


def _eval(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        return env[node[1]]
    if tag == "neg":
        return -_eval(node[1], env)
    if tag == "call":
        return _FUNCS[node[1]](_eval(node[2], env))
    op, lhs, rhs = node[1], _eval(node[2], env), _eval(node[3], env)
    if op == "+":
        return lhs + rhs
    if op == "-":
        return lhs - rhs
    if op == "*":
        return lhs * rhs
    return lhs / rhs


@dataclass(frozen=True)
class Expression:
    """A parsed expression in ``x`` and ``y``; calling it broadcasts to the
    shape of its arguments."""

    source: str
    constants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        tree = _Parser(tokenize(self.source)).parse()
        allowed = {"x", "y", "pi"} | set(self.constants)
        unknown = _names(tree, set()) - allowed
        if unknown:
            raise ExpressionError(f"unknown names {sorted(unknown)} in {self.source!r}")
        object.__setattr__(self, "_tree", tree)

    @property
    def is_constant(self) -> bool:
        return not (_names(self._tree, set()) & {"x", "y"})

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        env = {"x": x, "y": y, "pi": np.pi, **{k: float(v) for k, v in self.constants.items()}}
        out = _eval(self._tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x, y).shape).copy()


def parse(source: str, constants: Mapping[str, float] | None = None) -> Expression:
    return Expression(source, dict(constants or {}))
