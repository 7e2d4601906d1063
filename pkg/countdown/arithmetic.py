"""
Arithmetic - Exact integer evaluation of CountDown expressions
Operators fold strictly left to right; only parentheses group
"""

import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

from core.errors import EvaluationError, ParseError

OPERATORS = ("+", "-", "*", "/")

_LEXEME = re.compile(r"\s*(?:(\d+)|([-+*/()]))")


def apply_op(a: int, op: str, b: int) -> int:
    """
    Apply one operator with exact integer semantics

    Raises:
        EvaluationError: division by zero or inexact division
    """
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0 or a % b != 0:
            raise EvaluationError(f"Inexact division {a} / {b}")
        return a // b
    raise ParseError(f"Unknown operator {op!r}")


def lex(expression: str) -> List[Union[int, str]]:
    """Split an expression into integers, operators and parentheses."""
    items: List[Union[int, str]] = []
    pos = 0
    text = expression.rstrip()
    while pos < len(text):
        match = _LEXEME.match(text, pos)
        if not match:
            raise ParseError(f"Unexpected character {text[pos]!r} in {expression!r}")
        number, symbol = match.groups()
        items.append(int(number) if number is not None else symbol)
        pos = match.end()
    return items


class _Parser:
    def __init__(self, items: Sequence[Union[int, str]], source: str):
        self.items = items
        self.pos = 0
        self.source = source
        self.numbers: List[int] = []

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else None

    def take(self):
        item = self.peek()
        self.pos += 1
        return item

    def operand(self) -> int:
        item = self.take()
        if isinstance(item, int):
            self.numbers.append(item)
            return item
        if item == "(":
            value = self.expression()
            if self.take() != ")":
                raise ParseError(f"Unbalanced parentheses in {self.source!r}")
            return value
        raise ParseError(f"Expected a number in {self.source!r}")

    def expression(self) -> int:
        value = self.operand()
        while self.peek() in OPERATORS:
            op = self.take()
            value = apply_op(value, op, self.operand())
        return value


def evaluate_left_to_right(expression: str) -> int:
    """
    Evaluate an expression such as "40 * 14 / 20"

    Args:
        expression: Integers joined by + - * /, optionally parenthesised

    Returns:
        Exact integer value

    Raises:
        ParseError: malformed expression
        EvaluationError: inexact or zero division
    """
    items = lex(expression)
    if not items:
        raise ParseError("Empty expression")
    parser = _Parser(items, expression)
    value = parser.expression()
    if parser.peek() is not None:
        raise ParseError(f"Trailing input in {expression!r}")
    return value


def operands_of(expression: str) -> List[int]:
    """Integers appearing in an expression, in order."""
    parser = _Parser(lex(expression), expression)
    parser.expression()
    return parser.numbers


@dataclass(frozen=True)
class Chain:
    """A flat expression a op b op c ..."""

    numbers: tuple
    ops: tuple

    @property
    def expression(self) -> str:
        parts = [str(self.numbers[0])]
        for op, n in zip(self.ops, self.numbers[1:]):
            parts.extend([op, str(n)])
        return " ".join(parts)

    def value(self) -> int:
        acc = self.numbers[0]
        for op, n in zip(self.ops, self.numbers[1:]):
            acc = apply_op(acc, op, n)
        return acc

    def render_steps(self) -> str:
        """
        Worked form "40 * 14 / 20 = 560 / 20 = 28"; each step folds the
        first two terms of the remaining chain.
        """
        numbers, ops = list(self.numbers), list(self.ops)
        pieces = [Chain(tuple(numbers), tuple(ops)).expression]
        while ops:
            numbers = [apply_op(numbers[0], ops[0], numbers[1])] + numbers[2:]
            ops = ops[1:]
            pieces.append(Chain(tuple(numbers), tuple(ops)).expression)
        return " = ".join(pieces)


def as_chain(expression: str) -> Optional[Chain]:
    """The flat chain of a parenthesis-free expression, else None."""
    items = lex(expression)
    if "(" in items or ")" in items or not items or len(items) % 2 == 0:
        return None
    numbers, ops = items[0::2], items[1::2]
    if not all(isinstance(n, int) for n in numbers) or not all(o in OPERATORS for o in ops):
        return None
    return Chain(tuple(numbers), tuple(ops))
