"""
Solver - Exhaustive CountDown oracle
Left-to-right chains are tried before parenthesised trees so most witnesses
render as a worked chain
"""

import itertools
import logging
from typing import Iterator, List, Optional, Sequence, Tuple

from core.errors import ArgumentError, EvaluationError
from countdown.arithmetic import OPERATORS, Chain, apply_op

logger = logging.getLogger("VerifScope.Solver")


def _positive_op(a: int, op: str, b: int) -> Optional[int]:
    """Result of a op b when it is a positive integer, else None."""
    try:
        value = apply_op(a, op, b)
    except EvaluationError:
        return None
    return value if value > 0 else None


def chain_value(chain: Chain) -> Optional[int]:
    """Value of a chain whose every intermediate is a positive integer."""
    acc = chain.numbers[0]
    for op, n in zip(chain.ops, chain.numbers[1:]):
        acc = _positive_op(acc, op, n)
        if acc is None:
            return None
    return acc


def enumerate_chains(operands: Sequence[int]) -> Iterator[Tuple[Chain, int]]:
    """
    Every valid left-to-right chain over all operands

    Yields (chain, value) in canonical order: operand permutations with the
    input order first, operators in + - * / order.
    """
    seen = set()
    for perm in itertools.permutations(operands):
        if perm in seen:
            continue
        seen.add(perm)
        for ops in itertools.product(OPERATORS, repeat=len(operands) - 1):
            chain = Chain(tuple(perm), tuple(ops))
            value = chain_value(chain)
            if value is not None:
                yield chain, value


def _trees(items: List[Tuple[int, str]]) -> Iterator[Tuple[int, str]]:
    """All parenthesised combinations of (value, text) items using each once."""
    if len(items) == 1:
        yield items[0]
        return
    for i, j in itertools.combinations(range(len(items)), 2):
        rest = [items[k] for k in range(len(items)) if k not in (i, j)]
        (a, ta), (b, tb) = items[i], items[j]
        candidates = []
        for op in OPERATORS:
            candidates.append((a, op, b, ta, tb))
            if op in "-/":
                candidates.append((b, op, a, tb, ta))
        for x, op, y, tx, ty in candidates:
            value = _positive_op(x, op, y)
            if value is None:
                continue
            yield from _trees(rest + [(value, f"({tx} {op} {ty})")])


def _strip_outer(text: str) -> str:
    if not (text.startswith("(") and text.endswith(")")):
        return text
    depth = 0
    for i, c in enumerate(text):
        depth += c == "("
        depth -= c == ")"
        if depth == 0 and i < len(text) - 1:
            return text
    return text[1:-1]


def brute_force_solve(operands: Sequence[int], target: int) -> Optional[str]:
    """
    Find an expression using every operand exactly once that equals target

    Args:
        operands: 2 to 4 integers in 1..999
        target: Number to reach

    Returns:
        Canonical witness expression, or None when unsolvable
    """
    if not 2 <= len(operands) <= 4 or any(not 1 <= n <= 999 for n in operands):
        raise ArgumentError(f"brute_force_solve expects 2-4 operands in 1..999, got {list(operands)}")
    for chain, value in enumerate_chains(operands):
        if value == target:
            return chain.expression
    for value, text in _trees([(n, str(n)) for n in operands]):
        if value == target:
            return _strip_outer(text)
    return None


def reachable_values(operands: Sequence[int]) -> set:
    """Every target reachable from the operands under the same rules."""
    values = {value for _, value in enumerate_chains(operands)}
    values.update(value for value, _ in _trees([(n, str(n)) for n in operands]))
    return values
