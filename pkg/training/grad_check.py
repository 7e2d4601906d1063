"""
Gradient Check - Central finite differences against the manual backward pass
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ArgumentError
from core.model import TransformerModel
from training.backprop import next_token_loss

logger = logging.getLogger("VerifScope.GradCheck")

# Below this magnitude the error is measured against the floor instead of |grad|
ABS_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_family: Dict[str, float]
    coordinates: int


def tensor_family(name: str) -> str:
    """"layers.3.w_q" -> "w_q"; top-level names are their own family."""
    return name.split(".")[-1]


def finite_difference(
    model: TransformerModel,
    tokens: Sequence[int],
    name: str,
    index: Tuple[int, ...],
    epsilon: float,
    completion_start: Optional[int] = None,
) -> float:
    """Central difference of the loss along one weight coordinate; weights are restored."""
    tensor = model.weights[name]
    original = tensor[index]
    try:
        tensor[index] = original + epsilon
        plus, _ = next_token_loss(model, tokens, completion_start)
        tensor[index] = original - epsilon
        minus, _ = next_token_loss(model, tokens, completion_start)
    finally:
        tensor[index] = original
    return (plus - minus) / (2.0 * epsilon)


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model: TransformerModel,
    tokens: Sequence[int],
    epsilon: float = 1e-3,
    coords_per_family: int = 200,
    seed: int = 0,
    completion_start: Optional[int] = None,
) -> GradCheckReport:
    """
    Compare analytic and numeric gradients on sampled coordinates

    Differencing runs on a float64 copy of the model; the original is untouched.

    Args:
        model: Tiny model (d <= 16, L <= 2)
        tokens: Sequence to differentiate
        epsilon: Finite-difference step
        coords_per_family: Coordinates sampled per tensor family (all of them when fewer exist)

    Returns:
        GradCheckReport with the maximum relative error overall and per family
    """
    if model.config.d_model > 16 or model.config.n_layers > 2:
        raise ArgumentError("grad_check is meant for tiny configs (d <= 16, L <= 2)")
    probe = TransformerModel(model.weights.astype(np.float64))
    _, grads = next_token_loss(probe, tokens, completion_start)
    rng = np.random.default_rng(seed)

    families: Dict[str, List[Tuple[str, Tuple[int, ...]]]] = {}
    for name, tensor in probe.weights.items():
        coords = families.setdefault(tensor_family(name), [])
        coords.extend((name, tuple(int(i) for i in idx)) for idx in np.ndindex(tensor.shape))

    per_family = {}
    total = 0
    for family, coords in sorted(families.items()):
        if len(coords) > coords_per_family:
            picks = rng.choice(len(coords), size=coords_per_family, replace=False)
            coords = [coords[int(i)] for i in sorted(picks)]
        worst = 0.0
        for name, index in coords:
            numeric = finite_difference(probe, tokens, name, index, epsilon, completion_start)
            worst = max(worst, relative_error(float(grads[name][index]), numeric))
        per_family[family] = worst
        total += len(coords)
        logger.debug(f"grad_check {family}: max relative error {worst:.3e} over {len(coords)} coordinates")
    return GradCheckReport(max(per_family.values()), per_family, total)
