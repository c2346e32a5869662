"""Text grammar for polynomial coefficients and initial/boundary data.

Accepted input::

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := ('+' | '-') factor | atom (('^' | '**') factor)?
    atom    := number | name | name '(' expr ')' | '(' expr ')'

``name`` must be one of the declared variables (or, for data expressions,
``t`` and the functions exp, sin, cos, sqrt, log).  Numbers use the usual
decimal/scientific notation.  ``^`` is exponentiation.
"""
from __future__ import annotations

import re
from typing import Iterable, Sequence

import sympy as sp
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from .errors import ParseError

DATA_FUNCTIONS = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos, "sqrt": sp.sqrt, "log": sp.log}

_TOKEN = re.compile(
    r"(?P<space>\s+)"
    r"|(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^])"
    r"|(?P<lpar>\()"
    r"|(?P<rpar>\))"
)

_TRANSFORMS = standard_transformations + (convert_xor,)


def default_variables(dim: int) -> tuple[str, ...]:
    if dim <= 3:
        return ("x", "y", "z")[:dim]
    return tuple(f"x{i + 1}" for i in range(dim))


def tokenize(text: str, names: Iterable[str], functions: Iterable[str] = ()) -> list[tuple[str, str, int]]:
    """Split ``text`` into (kind, value, position) tokens, validating adjacency."""
    names = set(names)
    functions = set(functions)
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise ParseError(text, pos, f"unexpected character {text[pos]!r}")
        kind = match.lastgroup
        value = match.group()
        if kind == "name":
            if value in functions:
                kind = "func"
            elif value not in names:
                raise ParseError(text, pos, f"unknown name {value!r}")
        if kind != "space":
            tokens.append((kind, value, pos))
        pos = match.end()

    if not tokens:
        raise ParseError(text, 0, "empty expression")

    depth = 0
    prev = None
    for kind, value, at in tokens:
        operand_expected = prev is None or prev in ("op", "lpar", "func")
        if kind == "op":
            if operand_expected and value not in "+-":
                raise ParseError(text, at, f"operator {value!r} without left operand")
        elif kind == "rpar":
            depth -= 1
            if depth < 0:
                raise ParseError(text, at, "unbalanced ')'")
            if operand_expected:
                raise ParseError(text, at, "empty parentheses or dangling operator")
        elif kind == "lpar":
            if not operand_expected:
                raise ParseError(text, at, "missing operator")
            depth += 1
        elif not operand_expected and kind in ("number", "name", "func"):
            raise ParseError(text, at, "missing operator")
        if prev == "func" and kind != "lpar":
            raise ParseError(text, at, "function name must be followed by '('")
        prev = kind
    if depth:
        raise ParseError(text, len(text), "unbalanced '('")
    if prev in ("op", "func"):
        raise ParseError(text, len(text), "expression ends with an operator")
    return tokens


def parse_expression(
    text: str,
    symbols: dict[str, sp.Symbol],
    functions: Sequence[str] = (),
) -> sp.Expr:
    """Parse ``text`` into a sympy expression over the given symbols."""
    tokenize(text, symbols, functions)
    local = dict(symbols)
    local.update({name: DATA_FUNCTIONS[name] for name in functions})
    try:
        expr = parse_expr(text, local_dict=local, transformations=_TRANSFORMS, evaluate=True)
    except (SyntaxError, TypeError, ValueError) as exc:
        raise ParseError(text, len(text), f"malformed expression ({exc})") from exc
    return sp.nsimplify(expr, rational=True)


__all__ = [
    "DATA_FUNCTIONS",
    "default_variables",
    "parse_expression",
    "tokenize",
]
