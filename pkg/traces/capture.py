"""
Capture - Record activation traces from forward passes
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, List, Optional, Sequence

import numpy as np

from core.errors import ArgumentError
from core.model import ForwardOptions, TransformerModel
from traces.trace import ActivationTrace, CaptureField

logger = logging.getLogger("VerifScope.Capture")


def capture(
    model: TransformerModel,
    tokens: Sequence[int],
    selection: Iterable[CaptureField],
    plan=None,
    plan_positions: Optional[np.ndarray] = None,
) -> ActivationTrace:
    """
    Run one forward pass and keep the selected fields

    Args:
        model: Model to observe
        tokens: Token ids
        selection: Fields to record
        plan: Optional intervention plan applied during the pass
        plan_positions: Positions where the plan is active (None for all)

    Raises:
        ArgumentError: empty selection
    """
    selection = frozenset(selection)
    if not selection:
        raise ArgumentError("capture needs at least one field")
    opts = ForwardOptions(capture=selection, plan=plan, plan_positions=plan_positions)
    _, trace = model.forward(tokens, opts)
    return trace


def capture_many(
    model: TransformerModel,
    sequences: Sequence[Sequence[int]],
    selection: Iterable[CaptureField],
    threads: int = 1,
) -> List[ActivationTrace]:
    """Capture several independent sequences; output order follows input order."""
    selection = frozenset(selection)
    if threads <= 1:
        return [capture(model, s, selection) for s in sequences]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: capture(model, s, selection), sequences))
