"""Arithmetic expression language for model coefficients.

Expressions are small syntax trees over the variables ``t``, ``x1..xd``,
``u1..uk``, ``a1..ad``, ``y`` and ``m``.  Evaluation is vectorised: bindings
may be floats or numpy arrays that broadcast against each other.

Grammar (``^`` binds tighter than unary minus and is right associative)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExpressionError",
    "ExpressionSyntaxError",
    "UnknownNameError",
    "UnboundVariableError",
    "ExpressionDomainError",
    "parse_expression",
    "eval_expression",
    "FUNCTIONS",
]


class ExpressionError(ValueError):
    pass


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class UnknownNameError(ExpressionError):
    def __init__(self, name: str, position: int):
        super().__init__(f"unknown name {name!r} at offset {position}")
        self.name = name
        self.position = position


class UnboundVariableError(ExpressionError):
    pass


class ExpressionDomainError(ExpressionError):
    pass


_VAR_RE = re.compile(r"^(t|y|m|[xua][1-9][0-9]*)$")


def _indicator_leq0(v):
    return np.where(v <= 0.0, 1.0, 0.0)


def _checked_log(v):
    if np.any(np.asarray(v) <= 0.0):
        raise ExpressionDomainError("log of nonpositive argument")
    return np.log(v)


def _checked_sqrt(v):
    if np.any(np.asarray(v) < 0.0):
        raise ExpressionDomainError("sqrt of negative argument")
    return np.sqrt(v)


def _fold(op):
    def f(*args):
        out = args[0]
        for a in args[1:]:
            out = op(out, a)
        return out

    return f


# name -> (callable, min arity, max arity or None)
FUNCTIONS = {
    "abs": (np.abs, 1, 1),
    "min": (_fold(np.minimum), 2, None),
    "max": (_fold(np.maximum), 2, None),
    "exp": (np.exp, 1, 1),
    "log": (_checked_log, 1, 1),
    "sqrt": (_checked_sqrt, 1, 1),
    "tanh": (np.tanh, 1, 1),
    "indicator_leq0": (_indicator_leq0, 1, 1),
    "normal_cdf": (ndtr, 1, 1),
}


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: "Expression"

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expression"
    right: "Expression"

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple

    def __str__(self):
        return f"{self.func}({', '.join(str(a) for a in self.args)})"


Expression = Union[Num, Var, Neg, BinOp, Call]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        mt = _TOKEN_RE.match(text, pos)
        if mt is None or mt.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = mt.lastgroup
        start = mt.start(kind)
        tokens.append((kind, mt.group(kind), start))
        pos = mt.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text, allowed):
        self.tokens = _tokenize(text)
        self.i = 0
        self.allowed = allowed

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExpressionSyntaxError(f"expected {value!r}, got {what}", pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            arg = self.unary()
            return Neg(arg) if val == "-" else arg
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise UnknownNameError(val, pos)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                _, lo, hi = FUNCTIONS[val]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise ExpressionSyntaxError(f"wrong number of arguments to {val}", pos)
                return Call(val, tuple(args))
            if not _VAR_RE.match(val) or (self.allowed is not None and val not in self.allowed):
                raise UnknownNameError(val, pos)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExpressionSyntaxError(f"unexpected {what}", pos)


def parse_expression(text: str, variables=None) -> Expression:
    """Parse ``text`` into a syntax tree.

    ``variables`` optionally restricts the admissible variable names; by
    default any of ``t, y, m, x<i>, u<i>, a<i>`` is accepted.
    """
    if not text or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    allowed = None if variables is None else frozenset(variables)
    return _Parser(text, allowed).parse()


def variables_of(expr: Expression) -> frozenset:
    if isinstance(expr, Var):
        return frozenset([expr.name])
    if isinstance(expr, Num):
        return frozenset()
    if isinstance(expr, Neg):
        return variables_of(expr.arg)
    if isinstance(expr, BinOp):
        return variables_of(expr.left) | variables_of(expr.right)
    return frozenset().union(*(variables_of(a) for a in expr.args))


def _power(base, expo):
    b = np.asarray(base, dtype=float)
    e = np.asarray(expo, dtype=float)
    if np.any((b == 0.0) & (e < 0.0)):
        raise ExpressionDomainError("zero raised to a negative power")
    if np.any((b < 0.0) & (e != np.round(e))):
        raise ExpressionDomainError("negative base with non-integer exponent")
    return np.power(b, e)


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"variable {node.name!r} is not bound") from None
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(np.asarray(b) == 0.0):
                raise ExpressionDomainError("division by zero")
            return a / b
        return _power(a, b)
    func = FUNCTIONS[node.func][0]
    return func(*(_eval(a, env) for a in node.args))


def eval_expression(expr: Expression, bindings: Mapping[str, object]):
    """Evaluate ``expr``; returns a float for scalar bindings, else an array."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _eval(expr, bindings)
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


def to_text(expr: Expression) -> str:
    return str(expr)


def constant_value(expr: Expression):
    """Return the float value if ``expr`` references no variables, else None."""
    if variables_of(expr):
        return None
    try:
        return float(eval_expression(expr, {}))
    except ExpressionError:
        return None


def is_finite(v) -> bool:
    return bool(np.all(np.isfinite(v))) if np.ndim(v) else math.isfinite(v)
