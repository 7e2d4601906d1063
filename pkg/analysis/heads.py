"""
Head Analysis - Previous-token heads, weights-only head scores, composition scores
and the greedy search for a minimal head subset that disables verification
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core import numerics
from core.errors import ArgumentError, DataError, DegenerateInputError, ShapeError
from core.model import HeadId, TransformerModel, Weights
from countdown.transcript import Transcript
from analysis.glu import VALID, GluSelection
from traces.trace import ActivationTrace

logger = logging.getLogger("VerifScope.Heads")

DEFAULT_THRESHOLD = 0.10
SWEEP_THRESHOLDS = (0.025, 0.05, 0.10)
DEFAULT_N = 200
N_SWEEP = (50, 100, 200, 300)

METHODS = ("eq8", "attention_density", "gate_up_similarity", "probe_similarity", "composition")


@dataclass
class PrevTokenHeadReport:
    head: HeadId
    mass: float
    samples: int
    flagged: bool = False


@dataclass
class HeadScore:
    head: HeadId
    score: float
    method: str


# ----------------------------------------------------------------------
# Previous-token heads
# ----------------------------------------------------------------------

def answer_positions(transcript: Transcript) -> List[int]:
    """Marker positions of correct attempts that were marked Valid."""
    return [a.marker_pos for a in transcript.correct_attempts() if a.is_valid]


def sample_mass(attention: np.ndarray, transcript: Transcript) -> Optional[np.ndarray]:
    """
    Attention paid to t_ans from each correct Valid attempt, averaged per head

    Returns:
        (L, H) masses, or None when the sample has no such attempt
    """
    positions = answer_positions(transcript)
    if not positions or transcript.t_ans is None:
        return None
    return np.mean(attention[:, :, positions, transcript.t_ans].astype(np.float64), axis=-1)


def detect_prev_token_heads(
    traces: Iterable[ActivationTrace],
    transcripts: Iterable[Transcript],
    threshold: float = DEFAULT_THRESHOLD,
    pooling: str = "per_sample",
) -> List[PrevTokenHeadReport]:
    """
    Mean attention mass on the target-number position for every head

    Args:
        traces: Traces with attention patterns (may be a lazy iterable)
        transcripts: Parsed transcripts aligned with traces
        threshold: Heads with mass >= threshold are flagged
        pooling: "per_sample" averages per sample first; "pooled" averages all attempts

    Returns:
        One report per head, in head order

    Raises:
        DataError: no sample has a correct attempt marked Valid
    """
    if pooling not in ("per_sample", "pooled"):
        raise ArgumentError(f"Unknown pooling {pooling!r}")
    total = None
    weight = 0
    samples = 0
    for trace, transcript in zip(traces, transcripts):
        if trace.attention is None:
            raise DataError("detect_prev_token_heads needs attention patterns")
        mass = sample_mass(trace.attention, transcript)
        if mass is None:
            continue
        n = len(answer_positions(transcript)) if pooling == "pooled" else 1
        total = mass * n if total is None else total + mass * n
        weight += n
        samples += 1
    if total is None:
        raise DataError("No correct attempts to measure attention on")
    mean = total / weight
    reports = []
    for layer in range(mean.shape[0]):
        for head in range(mean.shape[1]):
            m = float(mean[layer, head])
            reports.append(PrevTokenHeadReport(HeadId(layer, head), m, samples, m >= threshold))
    flagged = [str(r.head) for r in reports if r.flagged]
    logger.info(f"{len(flagged)} heads at threshold {threshold:.3f} over {samples} samples: {', '.join(flagged)}")
    return reports


def flag(reports: Sequence[PrevTokenHeadReport], threshold: float) -> List[HeadId]:
    return [r.head for r in reports if r.mass >= threshold]


def threshold_sweep(reports: Sequence[PrevTokenHeadReport], thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> List[dict]:
    rows = []
    for threshold in thresholds:
        heads = flag(reports, threshold)
        rows.append({"threshold": threshold, "count": len(heads), "heads": " ".join(str(h) for h in heads)})
    return rows


# ----------------------------------------------------------------------
# Weights-only scores
# ----------------------------------------------------------------------

def glu_refs(weights: Weights, selection: GluSelection, n: int = DEFAULT_N, polarity: str = VALID) -> Tuple[np.ndarray, np.ndarray]:
    """
    (gate rows, up rows) of the n selected vectors with the highest similarity

    Fewer than n rows come back when the selection is smaller.
    """
    vectors = selection.valid if polarity == VALID else selection.invalid
    ranked = sorted(vectors, key=lambda v: (-selection.similarity.get(v, 0.0), v))[:n]
    if not ranked:
        raise DataError(f"Selection has no {polarity} vectors")
    gates = np.stack([weights.layer(v.layer, "w_gate")[v.row] for v in ranked])
    ups = np.stack([weights.layer(v.layer, "w_up")[v.row] for v in ranked])
    return gates, ups


def score_head_glu_alignment(weights: Weights, head: HeadId, gates: np.ndarray, ups: np.ndarray) -> float:
    """
    How strongly the head's OV circuit alone drives the referenced GLU neurons

    score = mean_i < silu(g_i^T OV), u_i^T OV > with OV = W_O W_V

    Raises:
        ArgumentError: no references
        ShapeError: reference width differs from d_model
    """
    gates = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    ups = np.atleast_2d(np.asarray(ups, dtype=np.float64))
    if gates.shape[0] == 0:
        raise ArgumentError("score_head_glu_alignment needs at least one GLU reference")
    d = weights.config.d_model
    if gates.shape != ups.shape or gates.shape[1] != d:
        raise ShapeError(f"GLU references {gates.shape}/{ups.shape} do not match d_model {d}")
    ov = TransformerModel(weights).ov_circuit(head).astype(np.float64)
    s = np.sum(numerics.silu(gates @ ov) * (ups @ ov), axis=1)
    return float(np.mean(s))


def composition_score(w1: np.ndarray, w2: np.ndarray) -> float:
    """
    ||W1 W2||_F / (||W1||_F ||W2||_F)

    Raises:
        ShapeError: inner dimensions differ
        DegenerateInputError: either matrix is zero
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape[-1] != w2.shape[0]:
        raise ShapeError(f"composition_score inner dimensions differ: {w1.shape} x {w2.shape}")
    n1, n2 = numerics.frobenius(w1), numerics.frobenius(w2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateInputError("composition_score of a zero matrix")
    return numerics.frobenius(w1 @ w2) / (n1 * n2)


def _ranked(scores: Dict[HeadId, float], method: str) -> List[HeadScore]:
    order = sorted(scores, key=lambda h: (-scores[h], h))
    return [HeadScore(h, float(scores[h]), method) for h in order]


def score_heads(weights: Weights, heads: Sequence[HeadId], gates: np.ndarray, ups: np.ndarray) -> List[HeadScore]:
    return _ranked({h: score_head_glu_alignment(weights, h, gates, ups) for h in heads}, "eq8")


def n_sweep(
    weights: Weights,
    heads: Sequence[HeadId],
    selection: GluSelection,
    ns: Sequence[int] = N_SWEEP,
) -> List[dict]:
    """Rank heads with the weights-only score for several reference counts."""
    rows = []
    for n in ns:
        gates, ups = glu_refs(weights, selection, n)
        if gates.shape[0] < n:
            logger.debug(f"N={n}: only {gates.shape[0]} references available")
        for rank, hs in enumerate(score_heads(weights, heads, gates, ups)):
            rows.append({"n": n, "rank": rank, "head": str(hs.head), "score": hs.score})
    return rows


def _probe_row(probes: Dict[int, object], layer: int) -> np.ndarray:
    """Valid row of the probe at `layer`, or of the closest probed layer."""
    if not probes:
        raise DataError("probe_similarity needs at least one probe")
    nearest = min(probes, key=lambda l: (abs(l - layer), l))
    return probes[nearest].W[1]


def alt_rankings(
    weights: Weights,
    heads: Sequence[HeadId],
    probes: Dict[int, object],
    selection: GluSelection,
    prev_reports: Sequence[PrevTokenHeadReport],
    n: int = DEFAULT_N,
    power_iterations: int = 100,
    seed: int = 0,
) -> Dict[str, List[HeadScore]]:
    """
    Rank the candidate heads under every method

    Similarities against an OV principal direction use the absolute cosine,
    since the direction's sign is arbitrary.

    Returns:
        method -> HeadScores sorted by descending score, ties by head id
    """
    model = TransformerModel(weights)
    gates, ups = glu_refs(weights, selection, n)
    glu_mean = np.concatenate([gates, ups]).mean(axis=0)
    stacked = np.concatenate([gates, ups]).astype(np.float64)
    masses = {r.head: r.mass for r in prev_reports}

    scores: Dict[str, Dict[HeadId, float]] = {m: {} for m in METHODS}
    for head in heads:
        ov = model.ov_circuit(head).astype(np.float64)
        scores["eq8"][head] = score_head_glu_alignment(weights, head, gates, ups)
        scores["attention_density"][head] = masses.get(head, 0.0)
        try:
            direction = numerics.principal_direction(ov, power_iterations, seed)
            scores["gate_up_similarity"][head] = abs(numerics.cosine_sim(glu_mean, direction))
            scores["probe_similarity"][head] = abs(numerics.cosine_sim(_probe_row(probes, head.layer), direction))
            scores["composition"][head] = composition_score(stacked, ov)
        except DegenerateInputError:
            for method in ("gate_up_similarity", "probe_similarity", "composition"):
                scores[method][head] = 0.0
    return {method: _ranked(scores[method], method) for method in METHODS}


def ranking_rows(rankings: Dict[str, List[HeadScore]]) -> List[dict]:
    rows = []
    for method in METHODS:
        for rank, hs in enumerate(rankings.get(method, [])):
            rows.append({"method": method, "rank": rank, "head": str(hs.head), "score": hs.score})
    return rows


# ----------------------------------------------------------------------
# Minimal subset search
# ----------------------------------------------------------------------

@dataclass
class SubsetSearchResult:
    heads: List[HeadId]
    rate: float
    log: List[dict] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.rate >= 1.0


def search_minimal_subset(
    ranking: Sequence[HeadId],
    evaluator: Callable[[List[HeadId]], float],
    budget: int,
) -> SubsetSearchResult:
    """
    Ablate growing prefixes of the ranking until the evaluator reports 100%

    Args:
        ranking: Candidate heads, best first
        evaluator: Returns the success + partial rate of ablating the given heads
        budget: Maximum number of evaluations

    Returns:
        The first prefix reaching 1.0, otherwise the best prefix seen
        (shortest on ties)

    Raises:
        ArgumentError: budget < 1 or empty ranking
    """
    if budget < 1:
        raise ArgumentError("search_minimal_subset needs a budget of at least one evaluation")
    if not ranking:
        raise ArgumentError("search_minimal_subset needs a nonempty ranking")
    best: Optional[SubsetSearchResult] = None
    log = []
    for size in range(1, min(budget, len(ranking)) + 1):
        prefix = list(ranking[:size])
        rate = float(evaluator(prefix))
        log.append({"step": size, "head": str(prefix[-1]), "size": size, "rate": rate})
        logger.info(f"Subset of {size} heads ({', '.join(str(h) for h in prefix)}): rate {rate:.3f}")
        if best is None or rate > best.rate:
            best = SubsetSearchResult(prefix, rate)
        if rate >= 1.0:
            break
    best.log = log
    return best
