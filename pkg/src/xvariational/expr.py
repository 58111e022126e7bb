"""Tiny arithmetic expressions over coordinates, e.g. ``"2 + sin(2*pi*x1)"``.

Supported: numbers, ``pi``, ``x1..xn``, ``+ - * /``, ``^`` or ``**``, unary
minus, and the functions ``sin``, ``cos``, ``abs``, ``sqrt``, ``exp``.
Evaluation is vectorized over an ``(N, n)`` array of points.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass

import numpy as np

__all__ = ["Expression", "ExpressionError", "compile_expression"]

_FUNCS = {"sin": np.sin, "cos": np.cos, "abs": np.abs, "sqrt": np.sqrt, "exp": np.exp}
_CONSTS = {"pi": np.pi}
_VAR = re.compile(r"^x([1-9][0-9]*)$")


class ExpressionError(ValueError):
    pass


def _check(node, n):
    if isinstance(node, ast.Expression):
        return _check(node.body, n)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return
    if isinstance(node, ast.Name):
        m = _VAR.match(node.id)
        if m:
            if n is not None and int(m.group(1)) > n:
                raise ExpressionError(f"variable {node.id} exceeds dimension {n}")
            return
        if node.id in _CONSTS:
            return
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.BinOp) and isinstance(
        node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
    ):
        _check(node.left, n)
        _check(node.right, n)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _check(node.operand, n)
        return
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.func.id not in _FUNCS or len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"unsupported call {ast.dump(node.func)}")
        _check(node.args[0], n)
        return
    raise ExpressionError(f"unsupported syntax: {type(node).__name__}")


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](_eval(node.args[0], env))
    a, b = _eval(node.left, env), _eval(node.right, env)
    op = node.op
    if isinstance(op, ast.Add):
        return a + b
    if isinstance(op, ast.Sub):
        return a - b
    if isinstance(op, ast.Mult):
        return a * b
    if isinstance(op, ast.Div):
        return a / b
    return a ** b


@dataclass(frozen=True)
class Expression:
    source: str
    n: int = None

    def __post_init__(self):
        try:
            tree = ast.parse(self.source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.source!r}: {exc.msg}") from None
        _check(tree, self.n)
        object.__setattr__(self, "_tree", tree.body)

    @property
    def is_constant(self) -> bool:
        return not any(isinstance(nd, ast.Name) and _VAR.match(nd.id)
                       for nd in ast.walk(self._tree))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = dict(_CONSTS)
        for i in range(x.shape[1]):
            env[f"x{i + 1}"] = x[:, i]
        try:
            out = _eval(self._tree, env)
        except KeyError as exc:
            raise ExpressionError(f"variable {exc.args[0]} not available for {x.shape[1]}-d points") from None
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()


def compile_expression(source, n=None) -> Expression:
    if isinstance(source, (int, float)):
        source = repr(float(source))
    return Expression(str(source), n)
