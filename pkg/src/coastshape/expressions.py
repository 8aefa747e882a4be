"""Minimal arithmetic expression parser for config-driven fields.

Grammar: + - * / ^ (right-assoc), unary minus, parentheses, the functions
exp/sin/cos and the variables x, y. Compiled once to a small AST; evaluation
broadcasts over numpy arrays.
"""

from __future__ import annotations

import math

import numpy as np

_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}


class ExpressionError(ValueError):
    def __init__(self, text, pos, message):
        marker = text[:pos] + ">>>" + text[pos:]
        super().__init__(f"{message} at position {pos}: {marker}")


class _Tokenizer:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.tokens = []
        self._scan()
        self.i = 0

    def _scan(self):
        t = self.text
        i = 0
        while i < len(t):
            c = t[i]
            if c.isspace():
                i += 1
            elif c in "+-*/^()":
                self.tokens.append((c, c, i))
                i += 1
            elif c.isdigit() or c == ".":
                j = i
                while j < len(t) and (t[j].isdigit() or t[j] in ".eE"
                                      or (t[j] in "+-" and t[j - 1] in "eE")):
                    j += 1
                try:
                    val = float(t[i:j])
                except ValueError:
                    raise ExpressionError(t, i, "malformed number") from None
                self.tokens.append(("num", val, i))
                i = j
            elif c.isalpha() or c == "_":
                j = i
                while j < len(t) and (t[j].isalnum() or t[j] == "_"):
                    j += 1
                self.tokens.append(("name", t[i:j], i))
                i = j
            else:
                raise ExpressionError(t, i, f"unexpected character {c!r}")
        self.tokens.append(("end", None, len(t)))

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok


class Expression:
    """Parsed arithmetic expression over variables x (and y in 2D)."""

    def __init__(self, text: str):
        self.text = text
        tz = _Tokenizer(text)
        self._ast = self._parse_sum(tz)
        kind, _, pos = tz.peek()
        if kind != "end":
            raise ExpressionError(text, pos, "trailing input")

    # sum := product (('+'|'-') product)*
    def _parse_sum(self, tz):
        node = self._parse_product(tz)
        while tz.peek()[0] in "+-":
            op = tz.next()[0]
            rhs = self._parse_product(tz)
            node = (op, node, rhs)
        return node

    def _parse_product(self, tz):
        node = self._parse_unary(tz)
        while tz.peek()[0] in "*/":
            op = tz.next()[0]
            rhs = self._parse_unary(tz)
            node = (op, node, rhs)
        return node

    def _parse_unary(self, tz):
        if tz.peek()[0] == "-":
            tz.next()
            return ("neg", self._parse_unary(tz))
        if tz.peek()[0] == "+":
            tz.next()
            return self._parse_unary(tz)
        return self._parse_power(tz)

    # power := atom ['^' unary]   (right associative, binds above unary minus
    # on the right: 2^-3 parses, -x^2 = -(x^2))
    def _parse_power(self, tz):
        base = self._parse_atom(tz)
        if tz.peek()[0] == "^":
            tz.next()
            return ("^", base, self._parse_unary(tz))
        return base

    def _parse_atom(self, tz):
        kind, val, pos = tz.next()
        if kind == "num":
            return ("num", val)
        if kind == "(":
            node = self._parse_sum(tz)
            k, _, p = tz.next()
            if k != ")":
                raise ExpressionError(self.text, p, "expected ')'")
            return node
        if kind == "name":
            if val in ("x", "y"):
                return ("var", val)
            if val == "pi":
                return ("num", math.pi)
            if val in _FUNCS:
                k, _, p = tz.next()
                if k != "(":
                    raise ExpressionError(self.text, p, f"{val} needs '('")
                arg = self._parse_sum(tz)
                k, _, p = tz.next()
                if k != ")":
                    raise ExpressionError(self.text, p, "expected ')'")
                return ("call", val, arg)
            raise ExpressionError(self.text, pos, f"unknown name {val!r}")
        raise ExpressionError(self.text, pos, "expected a value")

    def __call__(self, x, y=None):
        env = {"x": np.asarray(x, dtype=float)}
        env["y"] = np.zeros_like(env["x"]) if y is None else np.asarray(y, dtype=float)
        return self._eval(self._ast, env)

    def _eval(self, node, env):
        op = node[0]
        if op == "num":
            return node[1]
        if op == "var":
            return env[node[1]]
        if op == "neg":
            return -self._eval(node[1], env)
        if op == "call":
            return _FUNCS[node[1]](self._eval(node[2], env))
        a = self._eval(node[1], env)
        b = self._eval(node[2], env)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return a / b
        if op == "^":
            return a ** b
        raise AssertionError(op)


def evaluate_on_points(expr: Expression, pts: np.ndarray) -> np.ndarray:
    """Evaluate at (..., dim) coordinate arrays (y = 0 in 1D)."""
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] == 1:
        return expr(pts[..., 0])
    return expr(pts[..., 0], pts[..., 1])
