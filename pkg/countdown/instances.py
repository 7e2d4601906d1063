"""
Instances - Seeded CountDown instance generation and prompt rendering
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from core.errors import ArgumentError, GenerationError
from countdown import tokenizer as tok
from countdown.solver import brute_force_solve

logger = logging.getLogger("VerifScope.Instances")

OPERAND_RANGE = (1, 99)
TARGET_RANGE = (10, 99)


@dataclass(frozen=True)
class Instance:
    """Operands and the target they must reach"""

    operands: Tuple[int, ...]
    target: int

    def to_dict(self) -> dict:
        return {"operands": list(self.operands), "target": self.target}

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        return cls(tuple(int(n) for n in data["operands"]), int(data["target"]))


def generate_instance(
    rng: np.random.Generator,
    n_operands: int,
    max_retries: int = 1000,
    operand_range: Tuple[int, int] = OPERAND_RANGE,
    target_range: Tuple[int, int] = TARGET_RANGE,
) -> Instance:
    """
    Draw a solvable instance by rejection sampling

    Args:
        rng: Seeded generator
        n_operands: 3 or 4
        max_retries: Draws before giving up

    Raises:
        GenerationError: no solvable draw within max_retries
    """
    if n_operands not in (3, 4):
        raise ArgumentError(f"n_operands must be 3 or 4, got {n_operands}")
    for _ in range(max_retries):
        operands = tuple(int(n) for n in rng.integers(operand_range[0], operand_range[1] + 1, size=n_operands))
        target = int(rng.integers(target_range[0], target_range[1] + 1))
        if brute_force_solve(operands, target) is not None:
            return Instance(operands, target)
    raise GenerationError(f"No solvable instance with {n_operands} operands after {max_retries} draws")


def generate_instances(rng: np.random.Generator, count: int, operand_counts: Sequence[int] = (3, 4)) -> List[Instance]:
    """A stream of instances, the operand count drawn per instance."""
    instances = []
    for _ in range(count):
        n = int(rng.choice(list(operand_counts)))
        instances.append(generate_instance(rng, n))
    return instances


def render_prompt(inst: Instance) -> str:
    """The user turn: "...Using the numbers [20, 14, 40], create an equation that equals 28. ..." """
    numbers = "[" + ", ".join(str(n) for n in inst.operands) + "]"
    return f"{tok.SYSTEM_PREFIX}{numbers}{tok.TARGET_PREFIX}{inst.target}{tok.INSTRUCTIONS}"


def generation_prompt(inst: Instance) -> str:
    """User turn followed by the assistant prefix and an open think tag."""
    return render_prompt(inst) + tok.ASSISTANT_PREFIX + tok.THINK_OPEN
