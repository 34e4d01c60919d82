"""Exact rational expression evaluator backing the ``calculator`` tool.

Grammar (``^`` binds tighter than unary minus and is right-associative)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | "(" expr ")"

Every intermediate value is checked against ``MAX_MAGNITUDE``.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction

from .errors import CalcDivisionByZero, CalcOverflow, CalcParseError

MAX_MAGNITUDE = Fraction(10) ** 300
# bounds the size of tiny results such as 0.5^100000, which MAX_MAGNITUDE does not catch
_MAX_BITS = 20000

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)|(.))")


def _tokenize(expr: str) -> list[str | Fraction]:
    tokens: list[str | Fraction] = []
    pos = 0
    expr = expr.rstrip()
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if m is None:  # pragma: no cover - the pattern matches any character
            raise CalcParseError(f"unexpected input at {pos}")
        number, op = m.groups()
        if number is not None:
            tokens.append(Fraction(number))
        elif op in "+-*/^()":
            tokens.append(op)
        else:
            raise CalcParseError(f"unexpected character {op!r} at {m.start(2)}")
        pos = m.end()
    return tokens


def _check(value: Fraction) -> Fraction:
    if abs(value) > MAX_MAGNITUDE:
        raise CalcOverflow("magnitude exceeds 1e300")
    return value


def _power(base: Fraction, exponent: Fraction) -> Fraction:
    if exponent.denominator != 1:
        raise CalcParseError("exponent must be an integer")
    n = exponent.numerator
    if base == 0 and n < 0:
        raise CalcDivisionByZero("zero raised to a negative power")
    if base == 0 or n == 0:
        return Fraction(int(n == 0))
    bits = max(abs(base.numerator).bit_length(), base.denominator.bit_length())
    if abs(n) * bits > _MAX_BITS:
        raise CalcOverflow("power too large to evaluate")
    if n > 0 and abs(base) > 1 and n * math.log10(abs(base)) > 301:
        raise CalcOverflow("magnitude exceeds 1e300")
    if n < 0 and abs(base) < 1 and -n * math.log10(1 / abs(base)) > 301:
        raise CalcOverflow("magnitude exceeds 1e300")
    return _check(base**n)


class _Parser:
    def __init__(self, tokens: list[str | Fraction]):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            value = _check(value + rhs if op == "+" else value - rhs)
        return value

    def term(self) -> Fraction:
        value = self.unary()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.unary()
            if op == "*":
                value = _check(value * rhs)
            else:
                if rhs == 0:
                    raise CalcDivisionByZero("division by zero")
                value = _check(value / rhs)
        return value

    def unary(self) -> Fraction:
        if self.peek() == "-":
            self.take()
            return -self.unary()
        return self.power()

    def power(self) -> Fraction:
        base = self.atom()
        if self.peek() == "^":
            self.take()
            return _power(base, self.unary())
        return base

    def atom(self) -> Fraction:
        tok = self.take()
        if isinstance(tok, Fraction):
            return _check(tok)
        if tok == "(":
            value = self.expr()
            if self.take() != ")":
                raise CalcParseError("expected ')'")
            return value
        raise CalcParseError(f"unexpected token {tok!r}" if tok is not None else "unexpected end of input")


def evaluate(expr: str) -> Fraction:
    """Evaluate ``expr`` exactly.

    Raises CalcParseError, CalcDivisionByZero or CalcOverflow.
    """
    tokens = _tokenize(expr)
    if not tokens:
        raise CalcParseError("empty expression")
    parser = _Parser(tokens)
    value = parser.expr()
    if parser.pos != len(tokens):
        raise CalcParseError(f"trailing input at token {parser.pos}")
    return value


def render_number(value: Fraction) -> str:
    """Integers without a decimal point, everything else as the shortest round-trip float."""
    if value.denominator == 1:
        return str(value.numerator)
    return repr(float(value))


def eval_expression(expr: str) -> Fraction:
    return evaluate(expr)


def parse_number(text: str) -> Fraction | None:
    """Exact parse of a plain decimal literal (optional sign); ``None`` if it is not one."""
    text = text.strip()
    if not re.fullmatch(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?", text):
        return None
    return Fraction(text)
