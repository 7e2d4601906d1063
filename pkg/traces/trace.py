"""
Activation Trace - Per-sequence record of the internal quantities of one forward pass
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, Iterable, List, Optional

import numpy as np


class CaptureField(Enum):
    """Fields a forward pass can record"""
    HIDDEN_STATES = "hidden"
    ATTENTION_PATTERNS = "attention"
    GLU_ACTIVATIONS = "glu"


ALL_FIELDS: FrozenSet[CaptureField] = frozenset(CaptureField)


def parse_selection(names: Iterable[str]) -> FrozenSet[CaptureField]:
    """Turn config strings such as ["hidden", "glu"] into a capture selection."""
    return frozenset(CaptureField(n) for n in names)


@dataclass
class ActivationTrace:
    """
    Activations of one sequence.

    hidden[l] is the residual stream after block l (x^l), resid_mid[l] the stream
    between the attention and GLU sublayers of block l, attention[l, h] the causal
    pattern of head h, glu[l] the GLU neuron activations M. Absent fields are None.
    """

    tokens: List[int]
    hidden: Optional[np.ndarray] = None       # (L, T, d)
    resid_mid: Optional[np.ndarray] = None    # (L, T, d)
    attention: Optional[np.ndarray] = None    # (L, H, T, T)
    glu: Optional[np.ndarray] = None          # (L, T, d_glu)
    meta: dict = field(default_factory=dict)

    @property
    def seq_len(self) -> int:
        return len(self.tokens)

    @property
    def fields(self) -> FrozenSet[CaptureField]:
        present = set()
        if self.hidden is not None:
            present.add(CaptureField.HIDDEN_STATES)
        if self.attention is not None:
            present.add(CaptureField.ATTENTION_PATTERNS)
        if self.glu is not None:
            present.add(CaptureField.GLU_ACTIVATIONS)
        return frozenset(present)

    def attention_row_error(self) -> float:
        """Largest deviation of any stored attention row sum from 1."""
        if self.attention is None:
            return 0.0
        sums = self.attention.astype(np.float64).sum(axis=-1)
        return float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
