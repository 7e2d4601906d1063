"""
Emb2Emb - Linear maps between token-embedding spaces of two models
Transfers probe rows and steering vectors from a source model to a target model
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core import numerics
from core.errors import ArgumentError, FormatError, NumericalError, ShapeError
from core.model import Weights
from core.weights_io import read_container, write_container

logger = logging.getLogger("VerifScope.Emb2Emb")

MAX_SAMPLE = 100000
RANK_RIDGE = 1e-3

Pairing = List[Tuple[int, int]]


def identity_pairing(vocab_size: int) -> Pairing:
    """Models sharing one vocabulary pair every token with itself."""
    return [(i, i) for i in range(vocab_size)]


def pairing_digest(pairing: Sequence[Tuple[int, int]]) -> str:
    h = hashlib.sha256()
    for s, t in pairing:
        h.update(f"{s}:{t};".encode("ascii"))
    return h.hexdigest()


@dataclass
class EmbeddingMap:
    """T maps source residual vectors to target residual vectors, (d_target, d_source)."""

    T: np.ndarray
    residual: float
    pairing_digest: str
    pairs_used: int

    def save(self, path: str, digest: str = "") -> None:
        meta = {
            "kind": "emb2emb",
            "residual": self.residual,
            "pairing_digest": self.pairing_digest,
            "pairs_used": self.pairs_used,
            "digest": digest,
        }
        write_container(path, {"T": self.T}, meta)

    @classmethod
    def load(cls, path: str) -> "EmbeddingMap":
        tensors, meta = read_container(path)
        if meta.get("kind") != "emb2emb" or "T" not in tensors or tensors["T"].ndim != 2:
            raise FormatError(f"{path} is not an embedding map")
        return cls(tensors["T"], float(meta["residual"]), str(meta["pairing_digest"]), int(meta["pairs_used"]))


def fit_map(
    source_embed: np.ndarray,
    target_embed: np.ndarray,
    pairing: Sequence[Tuple[int, int]],
    n_sample: Optional[int] = None,
    seed: int = 0,
) -> EmbeddingMap:
    """
    Least-squares map from source embedding columns onto paired target columns

    Args:
        source_embed: Source W_E, (d_source, V_source)
        target_embed: Target W_E, (d_target, V_target)
        pairing: (source token, target token) pairs
        n_sample: Pairs sampled for the fit; defaults to min(|pairing|, 100000)
        seed: Sampling seed

    Raises:
        ArgumentError: empty pairing or n_sample larger than the pairing
    """
    pairing = list(pairing)
    if not pairing:
        raise ArgumentError("fit_map needs a nonempty pairing")
    n_sample = min(len(pairing), MAX_SAMPLE) if n_sample is None else int(n_sample)
    if not 1 <= n_sample <= len(pairing):
        raise ArgumentError(f"n_sample={n_sample} must lie in 1..{len(pairing)}")
    if n_sample < len(pairing):
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(pairing), size=n_sample, replace=False))
        pairs = [pairing[int(i)] for i in picks]
    else:
        pairs = pairing
    src = np.asarray(source_embed)[:, [s for s, _ in pairs]].T
    tgt = np.asarray(target_embed)[:, [t for _, t in pairs]].T

    ridge = 1e-6
    if len(pairs) < src.shape[1]:
        logger.warning(f"Only {len(pairs)} pairs for a {src.shape[1]}-dimensional source space; fitting with ridge {RANK_RIDGE}")
        ridge = RANK_RIDGE
    try:
        t = numerics.least_squares_fit(src, tgt, ridge)
    except NumericalError:
        logger.warning(f"Gram matrix ill-conditioned; refitting with ridge {RANK_RIDGE}")
        t = numerics.least_squares_fit(src, tgt, RANK_RIDGE)
    residual = numerics.fit_residual(src, tgt, t)
    logger.info(f"Fitted {t.shape[0]}x{t.shape[1]} map on {len(pairs)} pairs, residual {residual:.3e}")
    return EmbeddingMap(t, residual, pairing_digest(pairing), len(pairs))


def transfer_vector(emb_map: EmbeddingMap, v: np.ndarray) -> np.ndarray:
    """
    T v

    Raises:
        ShapeError: v does not live in the source space
    """
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] != emb_map.T.shape[1]:
        raise ShapeError(f"Vector of shape {v.shape} against a map from {emb_map.T.shape[1]} dimensions")
    return emb_map.T @ v


def transfer_rows(emb_map: EmbeddingMap, rows: np.ndarray) -> np.ndarray:
    """Transfer every row of a matrix, e.g. both probe rows."""
    return np.stack([transfer_vector(emb_map, r) for r in np.atleast_2d(rows)])


def rotate_model(weights: Weights, q: np.ndarray) -> Weights:
    """
    Re-parameterise a model in the residual basis x' = Q x

    Q must be a signed permutation so that it commutes with RMS normalisation;
    the norm scales are permuted along with it. The rotated model computes the
    same logits as the original.

    Raises:
        ArgumentError: Q is not a d x d signed permutation
    """
    d = weights.config.d_model
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (d, d) or not np.array_equal(np.abs(q).sum(axis=0), np.ones(d)) \
            or not np.array_equal(np.abs(q).sum(axis=1), np.ones(d)):
        raise ArgumentError("rotate_model needs a d x d signed permutation matrix")
    perm = np.abs(q)
    dtype = weights.dtype

    def cast(a: np.ndarray) -> np.ndarray:
        return a.astype(dtype)

    out = {}
    for name, tensor in weights.items():
        t = tensor.astype(np.float64)
        leaf = name.split(".")[-1]
        if leaf.endswith("norm"):
            out[name] = cast(perm @ t)
        elif name == "embed":
            out[name] = cast(q @ t)
        elif name == "pos" or leaf in ("w_q", "w_k", "w_v", "w_gate", "w_up", "w_out"):
            out[name] = cast(t @ q.T)
        elif leaf == "w_o":
            out[name] = cast(np.matmul(q, t))
        else:
            raise ArgumentError(f"rotate_model does not know tensor {name}")
    return Weights(weights.config, out)
