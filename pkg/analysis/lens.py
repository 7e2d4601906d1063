"""
Logit Lens - Read intermediate residual streams through the final norm and unembedding
Also hosts probe-direction steering of generation and of marker predictions
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import numerics
from core.errors import ArgumentError, DataError
from core.model import ForwardOptions, Steering, TransformerModel
from countdown import tokenizer as tok
from countdown.tokenizer import Tokenizer
from countdown.transcript import Transcript
from traces.trace import ActivationTrace

logger = logging.getLogger("VerifScope.Lens")

DEFAULT_ALPHA = 20.0


def logit_lens(model: TransformerModel, trace: ActivationTrace, layer: int, t: int) -> np.ndarray:
    """
    Token distribution softmax(unembed(final_norm(x^layer_t)))

    Raises:
        IndexError: layer or timestep outside the trace
        DataError: trace without hidden states
    """
    if trace.hidden is None:
        raise DataError("logit_lens needs a trace with hidden states")
    if not 0 <= layer < trace.hidden.shape[0]:
        raise IndexError(f"Layer {layer} outside 0..{trace.hidden.shape[0] - 1}")
    if not 0 <= t < trace.hidden.shape[1]:
        raise IndexError(f"Timestep {t} outside 0..{trace.hidden.shape[1] - 1}")
    x = trace.hidden[layer, t:t + 1]
    return numerics.softmax_rows(model.unembed(model.final_normed(x)))[0]


@dataclass
class LensReport:
    """Per layer: top-k (token id, mean probability), sorted by probability"""

    top: Dict[int, List[Tuple[int, float]]]
    samples: int
    timestep_class: str = ""

    def rows(self, tokenizer: Optional[Tokenizer] = None) -> List[dict]:
        out = []
        for layer in sorted(self.top):
            for rank, (token, prob) in enumerate(self.top[layer]):
                out.append({
                    "layer": layer,
                    "rank": rank,
                    "token_id": token,
                    "token": tokenizer.piece(token) if tokenizer else str(token),
                    "mean_probability": prob,
                })
        return out

    def save(self, path: str, tokenizer: Optional[Tokenizer] = None) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        columns = ["layer", "rank", "token_id", "token", "mean_probability"]
        pd.DataFrame(self.rows(tokenizer), columns=columns).to_csv(path, index=False, float_format="%.8g")


def aggregate_lens(
    model: TransformerModel,
    traces: Sequence[ActivationTrace],
    positions: Sequence[Sequence[int]],
    top_k: int = 5,
    timestep_class: str = "",
) -> LensReport:
    """
    Mean lens distribution per layer across samples

    Each sample contributes the mean of its distributions at its positions;
    samples without positions are left out.

    Args:
        model: Model whose unembedding reads the states
        traces: Traces with hidden states
        positions: Timesteps per trace (e.g. t_valid)
        top_k: Tokens kept per layer
        timestep_class: Label stored in the report
    """
    if len(traces) != len(positions):
        raise DataError(f"{len(traces)} traces but {len(positions)} position lists")
    n_layers = model.config.n_layers
    totals = np.zeros((n_layers, model.config.vocab_size), dtype=np.float64)
    used = 0
    for trace, steps in zip(traces, positions):
        if not steps:
            continue
        for layer in range(n_layers):
            dists = [logit_lens(model, trace, layer, t) for t in steps]
            totals[layer] += np.mean(np.asarray(dists, dtype=np.float64), axis=0)
        used += 1
    if used == 0:
        raise DataError("aggregate_lens needs at least one trace with positions")
    means = totals / used
    top = {}
    for layer in range(n_layers):
        # stable sort on negated probability keeps ties in token order
        order = np.argsort(-means[layer], kind="stable")[:top_k]
        top[layer] = [(int(i), float(means[layer, i])) for i in order]
    return LensReport(top=top, samples=used, timestep_class=timestep_class)


# ----------------------------------------------------------------------
# Steering
# ----------------------------------------------------------------------

def default_steer_layers(n_layers: int) -> Tuple[int, ...]:
    """Layers from two thirds of the depth to the last one."""
    return tuple(range((2 * n_layers) // 3, n_layers))


def _steering(model: TransformerModel, vector: np.ndarray, layers: Optional[Sequence[int]], alpha: float, start: int) -> Steering:
    layers = default_steer_layers(model.config.n_layers) if layers is None else tuple(int(l) for l in layers)
    if not layers:
        raise ArgumentError("Steering needs at least one layer")
    vector = np.asarray(vector, dtype=np.float32)
    if vector.shape != (model.config.d_model,):
        raise ArgumentError(f"Steering vector of shape {vector.shape} does not match d_model {model.config.d_model}")
    return Steering(layers=layers, vector=vector, alpha=float(alpha), start=start)


def steer_generate(
    model: TransformerModel,
    prompt: Sequence[int],
    probe_row: np.ndarray,
    layers: Optional[Sequence[int]] = None,
    alpha: float = DEFAULT_ALPHA,
    max_new: int = 100,
    stop_token: Optional[int] = None,
) -> List[int]:
    """
    Greedy generation with alpha * unit(probe_row) added after each listed block
    at every generated position

    Raises:
        ArgumentError: empty layer set or wrong vector size
    """
    steer = _steering(model, probe_row, layers, alpha, start=len(prompt))
    max_new = min(max_new, model.config.max_seq_len - len(prompt))
    return model.generate(prompt, max_new, ForwardOptions(steer=steer), stop_token=stop_token)


@dataclass
class SteeringReport:
    """Marker predictions at Invalid attempts with and without steering"""

    markers: int = 0
    flipped: int = 0
    margins_before: List[float] = field(default_factory=list)
    margins_after: List[float] = field(default_factory=list)

    @property
    def flip_rate(self) -> float:
        return self.flipped / self.markers if self.markers else 0.0

    @property
    def margin_shifts(self) -> np.ndarray:
        return np.asarray(self.margins_after) - np.asarray(self.margins_before)

    def summary(self) -> dict:
        shifts = self.margin_shifts
        return {
            "markers": self.markers,
            "flipped": self.flipped,
            "flip_rate": self.flip_rate,
            "mean_margin_shift": float(np.mean(shifts)) if len(shifts) else 0.0,
        }


def marker_margin(logits_row: np.ndarray, tokenizer: Tokenizer) -> float:
    """Logit of "this" minus logit of "not"."""
    return float(logits_row[tokenizer.token_id(tok.VALID_WORD)] - logits_row[tokenizer.token_id(tok.INVALID_WORD)])


def steer_markers(
    model: TransformerModel,
    transcripts: Sequence[Transcript],
    tokenizer: Tokenizer,
    vector: np.ndarray,
    layers: Optional[Sequence[int]] = None,
    alpha: float = DEFAULT_ALPHA,
    toward_valid: bool = True,
) -> SteeringReport:
    """
    Steer the completion and read the marker word at teacher-forced attempts

    toward_valid=True looks at Invalid attempts and counts predictions that
    flip to "this"; False looks at Valid attempts and counts flips to "not".
    """
    report = SteeringReport()
    this_id, not_id = tokenizer.token_id(tok.VALID_WORD), tokenizer.token_id(tok.INVALID_WORD)
    wanted, source = (this_id, not_id) if toward_valid else (not_id, this_id)
    for transcript in transcripts:
        steer = _steering(model, vector, layers, alpha, start=transcript.prompt_len)
        for attempt in transcript.attempts:
            if attempt.is_valid == toward_valid:
                continue
            prefix = transcript.tokens[: attempt.marker_pos + 1]
            base, _ = model.forward(prefix)
            steered, _ = model.forward(prefix, ForwardOptions(steer=steer))
            report.markers += 1
            report.margins_before.append(marker_margin(base[-1], tokenizer))
            report.margins_after.append(marker_margin(steered[-1], tokenizer))
            before = int(np.argmax(base[-1]))
            after = int(np.argmax(steered[-1]))
            report.flipped += int(before == source and after == wanted)
    logger.info(
        f"Steering toward {'valid' if toward_valid else 'invalid'}: "
        f"{report.flipped}/{report.markers} markers flipped"
    )
    return report
