"""
GLU Analysis - GLU_Out vector selection, token neighbours, receptive fields
and activation reports for the verification vectors
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from core import numerics
from core.errors import ArgumentError, DataError, FormatError, ShapeError
from core.model import ModelConfig, Weights
from countdown.tokenizer import Tokenizer
from traces.trace import ActivationTrace

logger = logging.getLogger("VerifScope.GLU")

VALID = "valid"
INVALID = "invalid"


@dataclass(frozen=True, order=True)
class GluVectorId:
    """Row `row` of W_out in block `layer`."""

    layer: int
    row: int

    def __str__(self) -> str:
        return f"({self.layer}, {self.row})"

    def check(self, config: ModelConfig) -> None:
        if not (0 <= self.layer < config.n_layers and 0 <= self.row < config.d_glu):
            raise IndexError(f"GLU vector {self} outside a model with {config.n_layers} layers x {config.d_glu} rows")


@dataclass
class GluSelection:
    """GLU_Out vectors most aligned with the probe rows, per layer"""

    valid: List[GluVectorId]
    invalid: List[GluVectorId]
    k: int
    layers: Tuple[int, ...]
    similarity: Dict[GluVectorId, float] = field(default_factory=dict)
    conflicts: int = 0

    def polarity(self, vec: GluVectorId) -> str:
        return VALID if vec in set(self.valid) else INVALID

    def budget_share(self, config: ModelConfig) -> float:
        """Fraction of all GLU_Out vectors of the model that are selected."""
        return (len(self.valid) + len(self.invalid)) / float(config.n_layers * config.d_glu)

    def rows(self) -> List[dict]:
        out = []
        for polarity, vectors in ((VALID, self.valid), (INVALID, self.invalid)):
            for vec in vectors:
                out.append({
                    "layer": vec.layer,
                    "row": vec.row,
                    "similarity": float(self.similarity.get(vec, float("nan"))),
                    "polarity": polarity,
                })
        return out

    def save(self, path: str, digest: str = "") -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        data = {"k": self.k, "layers": list(self.layers), "conflicts": self.conflicts, "digest": digest, "vectors": self.rows()}
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "GluSelection":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
        if not isinstance(data, dict) or "vectors" not in data:
            raise FormatError(f"{path} is not a GLU selection file")
        valid, invalid, sims = [], [], {}
        for entry in data["vectors"]:
            vec = GluVectorId(int(entry["layer"]), int(entry["row"]))
            (valid if entry["polarity"] == VALID else invalid).append(vec)
            sims[vec] = float(entry["similarity"])
        return cls(valid, invalid, int(data["k"]), tuple(data["layers"]), sims, int(data.get("conflicts", 0)))


def default_glu_layers(n_layers: int) -> Tuple[int, ...]:
    """Second half of the model."""
    return tuple(range(n_layers // 2, n_layers))


def _top_rows(sims: np.ndarray, k: int) -> List[int]:
    # ties resolve to the lower row
    return [int(i) for i in np.argsort(-sims, kind="stable")[:k]]


def select_top_k(
    weights: Weights,
    probes: Dict[int, object],
    k: int = 50,
    layers: Optional[Sequence[int]] = None,
    dedup: bool = True,
) -> GluSelection:
    """
    Rank W_out rows by cosine similarity with the probe rows of their layer

    Args:
        weights: Model weights
        probes: Probe per layer (anything with W of shape (2, d))
        k: Vectors kept per layer and polarity
        layers: Layers to search; defaults to the second half
        dedup: Give a row found in both lists to the polarity it is more similar to

    Raises:
        ArgumentError: k outside 1..d_glu
        DataError: a layer has no probe
    """
    config = weights.config
    if not 1 <= k <= config.d_glu:
        raise ArgumentError(f"k={k} must lie in 1..d_glu={config.d_glu}")
    layers = default_glu_layers(config.n_layers) if layers is None else tuple(int(l) for l in layers)
    valid: List[GluVectorId] = []
    invalid: List[GluVectorId] = []
    similarity: Dict[GluVectorId, float] = {}
    conflicts = 0
    for layer in layers:
        if layer not in probes:
            raise DataError(f"No probe for layer {layer}")
        w_out = weights.layer(layer, "w_out")
        probe_w = probes[layer].W
        sims_valid = numerics.cosine_sim_rows(w_out, probe_w[1])
        sims_invalid = numerics.cosine_sim_rows(w_out, probe_w[0])
        top_valid = _top_rows(sims_valid, k)
        top_invalid = _top_rows(sims_invalid, k)
        if dedup:
            shared = set(top_valid) & set(top_invalid)
            if shared:
                conflicts += len(shared)
                logger.warning(f"Layer {layer}: {len(shared)} rows selected for both polarities")
                top_valid = [r for r in top_valid if r not in shared or sims_valid[r] >= sims_invalid[r]]
                top_invalid = [r for r in top_invalid if r not in shared or sims_invalid[r] > sims_valid[r]]
        for row in top_valid:
            vec = GluVectorId(layer, row)
            valid.append(vec)
            similarity[vec] = float(sims_valid[row])
        for row in top_invalid:
            vec = GluVectorId(layer, row)
            invalid.append(vec)
            similarity.setdefault(vec, float(sims_invalid[row]))
    selection = GluSelection(valid, invalid, k, layers, similarity, conflicts)
    logger.info(
        f"Selected {len(valid)} valid and {len(invalid)} invalid vectors "
        f"({100.0 * selection.budget_share(config):.2f}% of all GLU_Out vectors)"
    )
    return selection


def glu_vector(weights: Weights, vec: GluVectorId) -> np.ndarray:
    vec.check(weights.config)
    return weights.layer(vec.layer, "w_out")[vec.row]


def nearest_neighbor_tokens(weights: Weights, v: np.ndarray, k: int = 10) -> List[Tuple[int, float]]:
    """
    Top-k vocabulary tokens by cosine similarity between v and the embedding columns

    Pass -v for the antipodal query.
    """
    embed = weights["embed"]
    v = np.asarray(v).ravel()
    if v.shape[0] != embed.shape[0]:
        raise ShapeError(f"Vector of length {v.shape[0]} against embeddings of width {embed.shape[0]}")
    sims = numerics.cosine_sim_rows(embed.T, v)
    return [(int(i), float(sims[i])) for i in np.argsort(-sims, kind="stable")[:k]]


# ----------------------------------------------------------------------
# Receptive fields
# ----------------------------------------------------------------------

@dataclass
class ReceptiveFieldSpec:
    """Neurons (gate row, up row) whose joint activation region is examined"""

    gates: np.ndarray   # (K, d)
    ups: np.ndarray     # (K, d)

    def __post_init__(self):
        self.gates = np.atleast_2d(np.asarray(self.gates))
        self.ups = np.atleast_2d(np.asarray(self.ups))
        if self.gates.shape != self.ups.shape or self.gates.shape[0] == 0:
            raise ArgumentError("ReceptiveFieldSpec needs matching, nonempty gate and up rows")

    @classmethod
    def from_layer(cls, weights: Weights, layer: int, rows: Optional[Sequence[int]] = None) -> "ReceptiveFieldSpec":
        gates = weights.layer(layer, "w_gate")
        ups = weights.layer(layer, "w_up")
        if rows is not None:
            rows = list(rows)
            gates, ups = gates[rows], ups[rows]
        return cls(gates, ups)

    def __len__(self) -> int:
        return self.gates.shape[0]


def receptive_field_contains(x: np.ndarray, spec: ReceptiveFieldSpec) -> Tuple[np.ndarray, bool]:
    """
    Neuron k is active at x iff silu(g_k . x) * (u_k . x) > 0

    Returns:
        (per-neuron activity, whether x lies in every receptive field)
    """
    x = np.asarray(x, dtype=spec.gates.dtype)
    if x.shape[-1] != spec.gates.shape[1]:
        raise ShapeError(f"Point of width {x.shape[-1]} against receptive field of width {spec.gates.shape[1]}")
    m = numerics.silu(x @ spec.gates.T) * (x @ spec.ups.T)
    active = m > 0
    return active, bool(np.all(active))


# ----------------------------------------------------------------------
# Activation reports
# ----------------------------------------------------------------------

def _mean_activations(
    traces: Sequence[ActivationTrace],
    positions: Sequence[Sequence[int]],
    vectors: Sequence[GluVectorId],
) -> np.ndarray:
    totals = np.zeros(len(vectors), dtype=np.float64)
    used = 0
    for trace, steps in zip(traces, positions):
        if not steps:
            continue
        if trace.glu is None:
            raise DataError("Trace has no GLU activations")
        for j, vec in enumerate(vectors):
            if vec.layer >= trace.glu.shape[0]:
                raise DataError(f"Trace has no layer {vec.layer} for vector {vec}")
            totals[j] += float(np.mean(trace.glu[vec.layer, list(steps), vec.row], dtype=np.float64))
        used += 1
    return totals / used if used else totals


def activation_report(
    selection: GluSelection,
    traces: Sequence[ActivationTrace],
    positions: Sequence[Sequence[int]],
    after: Optional[Sequence[ActivationTrace]] = None,
) -> List[dict]:
    """
    Mean activation m_j of every selected vector at the given timesteps

    With `after`, the second trace set (same tokens, another plan) is reported
    alongside with its delta.

    Raises:
        DataError: traces without GLU activations or lacking a selected layer
    """
    if len(traces) != len(positions) or (after is not None and len(after) != len(traces)):
        raise DataError("Trace sets and position lists must align")
    vectors = list(selection.valid) + list(selection.invalid)
    before_means = _mean_activations(traces, positions, vectors)
    after_means = _mean_activations(after, positions, vectors) if after is not None else None
    rows = []
    for j, vec in enumerate(vectors):
        row = {
            "vector": str(vec),
            "layer": vec.layer,
            "row": vec.row,
            "polarity": VALID if j < len(selection.valid) else INVALID,
            "before": float(before_means[j]),
        }
        if after_means is not None:
            row["after"] = float(after_means[j])
            row["delta"] = float(after_means[j] - before_means[j])
        rows.append(row)
    return rows


def save_rows(rows: Sequence[dict], path: str, columns: Sequence[str]) -> None:
    """CSV with a fixed column order."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False, float_format="%.8g")


# ----------------------------------------------------------------------
# Antipodal directions
# ----------------------------------------------------------------------

def neighbor_rows(
    weights: Weights,
    selection: GluSelection,
    k: int = 10,
    tokenizer: Optional[Tokenizer] = None,
) -> List[dict]:
    """Nearest tokens of each selected vector and of its antipode, side by side."""
    rows = []
    for vec in list(selection.valid) + list(selection.invalid):
        v = glu_vector(weights, vec)
        pos = nearest_neighbor_tokens(weights, v, k)
        neg = nearest_neighbor_tokens(weights, -v, k)
        for rank, ((tp, sp), (tn, sn)) in enumerate(zip(pos, neg)):
            rows.append({
                "vector": str(vec),
                "polarity": selection.polarity(vec),
                "rank": rank,
                "token": tokenizer.piece(tp) if tokenizer else str(tp),
                "similarity": sp,
                "antipode_token": tokenizer.piece(tn) if tokenizer else str(tn),
                "antipode_similarity": sn,
            })
    return rows


def silu_negative_extremum(lo: float = -20.0, samples: int = 200001) -> Tuple[float, float]:
    """
    Largest |silu(a)| over a < 0 on a dense grid

    Returns:
        (argmin a, |silu(a)|)
    """
    a = np.linspace(lo, 0.0, samples, dtype=np.float64)[:-1]
    values = np.abs(numerics.silu(a))
    i = int(np.argmax(values))
    return float(a[i]), float(values[i])


def neuron_contribution(gate_pre: float, up_pre: float, v: np.ndarray, activation: str = "silu") -> np.ndarray:
    """m * v for one neuron with preactivations gate_pre and up_pre."""
    a = np.float64(gate_pre)
    if activation == "silu":
        gated = numerics.silu(a)
    elif activation == "relu":
        gated = numerics.relu(a)
    else:
        raise ArgumentError(f"Unknown activation {activation!r}")
    return float(gated * up_pre) * np.asarray(v, dtype=np.float64)


def antipodal_audit(
    weights: Weights,
    selection: GluSelection,
    k: int = 10,
    tokenizer: Optional[Tokenizer] = None,
) -> dict:
    """
    Neighbours of each vector and its antipode, plus the SiLU sign-flip check

    The check feeds a neuron with gate preactivation -1 and up preactivation 1
    through silu and through a relu clamp.
    """
    rows = neighbor_rows(weights, selection, k, tokenizer)
    vectors = list(selection.valid) + list(selection.invalid)
    v = glu_vector(weights, vectors[0]) if vectors else np.ones(weights.config.d_model)
    silu_part = neuron_contribution(-1.0, 1.0, v, "silu")
    relu_part = neuron_contribution(-1.0, 1.0, v, "relu")
    v_norm = numerics.norm(v)
    at, bound = silu_negative_extremum()
    check = {
        "silu_coefficient": float(numerics.silu(np.float64(-1.0))),
        "flips_direction": bool(v_norm == 0 or numerics.cosine_sim(silu_part, v) < 0),
        "magnitude_ratio": numerics.norm(silu_part) / v_norm if v_norm else 0.0,
        "relu_contribution_norm": numerics.norm(relu_part),
        "negative_branch_max": bound,
        "negative_branch_argmax": at,
    }
    within = check["magnitude_ratio"] <= numerics.SILU_NEGATIVE_BOUND
    check["within_bound"] = bool(within)
    return {"neighbors": rows, "mechanism": check}
