"""
Linear Probes - Per-layer 2 x d classifiers separating "not" from "this" states
Trained with AdamW on softmax(W x) without a bias; rows double as steering directions
"""

import logging
import math
import os
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import numerics
from core.errors import ArgumentError, FormatError, TrainingError
from core.weights_io import read_container, write_container
from traces.dataset import INVALID_LABEL, VALID_LABEL, ProbeDataset

logger = logging.getLogger("VerifScope.Probe")


@dataclass
class ProbeHyper:
    """Probe optimiser settings"""

    learning_rate: float = 1e-4
    batch_size: int = 8
    val_size: int = 256
    weight_decay: float = 0.01
    eval_every: int = 50
    patience: int = 10
    max_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    balance: bool = True
    seed: int = 0

    @classmethod
    def from_section(cls, section: dict) -> "ProbeHyper":
        known = {f.name: section[f.name] for f in fields(cls) if f.name in section and section[f.name] is not None}
        return cls(**known)


@dataclass
class Probe:
    """W[0] is the "not" direction, W[1] the "this" direction."""

    layer: int
    W: np.ndarray
    val_accuracy: float = float("nan")

    @property
    def valid_direction(self) -> np.ndarray:
        return self.W[VALID_LABEL]

    @property
    def invalid_direction(self) -> np.ndarray:
        return self.W[INVALID_LABEL]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(numerics.as_matrix(x) @ self.W.T, axis=-1)

    def save(self, path: str, digest: str = "") -> None:
        meta = {"kind": "probe", "layer": int(self.layer), "val_accuracy": float(self.val_accuracy), "digest": digest}
        write_container(path, {"W": self.W}, meta)

    @classmethod
    def load(cls, path: str) -> "Probe":
        tensors, meta = read_container(path)
        if meta.get("kind") != "probe" or "W" not in tensors:
            raise FormatError(f"{path} is not a probe file")
        w = tensors["W"]
        if w.ndim != 2 or w.shape[0] != 2:
            raise FormatError(f"{path}: probe matrix has shape {w.shape}, expected (2, d)")
        return cls(layer=int(meta["layer"]), W=w, val_accuracy=float(meta.get("val_accuracy", float("nan"))))


def probe_path(directory: str, layer: int) -> str:
    return os.path.join(directory, f"probe_layer{layer}.vsw")


def _loss_and_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    logits = x @ w.T
    log_probs = numerics.log_softmax_rows(logits)
    n = len(y)
    loss = float(-np.mean(log_probs[np.arange(n), y], dtype=np.float64))
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1
    return loss, (dlogits / np.float32(n)).T @ x


def eval_probe(probe: Probe, dataset: ProbeDataset) -> float:
    """
    Fraction of examples whose argmax prediction equals the label

    Raises:
        ArgumentError: empty dataset
    """
    if len(dataset) == 0:
        raise ArgumentError("eval_probe needs at least one example")
    return float(np.mean(probe.predict(dataset.x) == dataset.y))


def train_probe(dataset: ProbeDataset, hyper: Optional[ProbeHyper] = None) -> Probe:
    """
    Fit W so that softmax(W x) predicts the marker label

    Args:
        dataset: Examples of one layer with both labels
        hyper: Optimiser settings

    Returns:
        The probe with the lowest validation loss seen at an evaluation point

    Raises:
        TrainingError: single-class data or a non-finite loss
    """
    hyper = hyper or ProbeHyper()
    counts = dataset.class_counts()
    if min(counts.values()) == 0:
        raise TrainingError(0, f"probe for layer {dataset.layer} needs both labels, got {counts}")
    rng = np.random.default_rng(hyper.seed)
    data = dataset.balance(rng) if hyper.balance else dataset
    train, val = data.split(hyper.val_size, rng)
    if len(val) == 0:
        val = train
    x = train.x.astype(np.float32)
    y = train.y.astype(np.int64)

    d = x.shape[1]
    w = (rng.standard_normal((2, d)) * (1.0 / math.sqrt(d))).astype(np.float32)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    lr, b1, b2 = np.float32(hyper.learning_rate), np.float32(hyper.beta1), np.float32(hyper.beta2)

    best_w, best_loss, stale = w.copy(), math.inf, 0
    order = rng.permutation(len(y))
    cursor = 0
    for step in range(1, hyper.max_steps + 1):
        if cursor + hyper.batch_size > len(order):
            order = rng.permutation(len(y))
            cursor = 0
        idx = order[cursor:cursor + hyper.batch_size]
        cursor += hyper.batch_size
        loss, grad = _loss_and_grad(w, x[idx], y[idx])
        if not math.isfinite(loss):
            raise TrainingError(step, f"probe loss is {loss}")
        # decoupled weight decay
        w -= lr * np.float32(hyper.weight_decay) * w
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        w -= lr * m_hat / (np.sqrt(v_hat) + np.float32(hyper.adam_eps))

        if step % hyper.eval_every and step != hyper.max_steps:
            continue
        val_loss, _ = _loss_and_grad(w, val.x, val.y)
        if val_loss < best_loss:
            best_w, best_loss, stale = w.copy(), val_loss, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                logger.debug(f"Probe layer {dataset.layer}: early stop at step {step}")
                break

    probe = Probe(layer=dataset.layer, W=best_w.astype(np.float32))
    probe.val_accuracy = eval_probe(probe, val)
    logger.info(f"Probe layer {dataset.layer}: validation accuracy {probe.val_accuracy:.3f} on {len(val)} examples")
    return probe


def probe_accuracy_curve(
    datasets: Dict[int, ProbeDataset],
    hyper: Optional[ProbeHyper] = None,
) -> Tuple[Dict[int, Probe], List[dict]]:
    """Train one probe per layer; rows hold (layer, examples, valid share, validation accuracy)."""
    probes: Dict[int, Probe] = {}
    rows = []
    for layer in sorted(datasets):
        dataset = datasets[layer]
        probe = train_probe(dataset, hyper)
        probes[layer] = probe
        rows.append({
            "layer": layer,
            "examples": len(dataset),
            "valid_share": float(np.mean(dataset.y == VALID_LABEL)),
            "val_accuracy": probe.val_accuracy,
        })
    return probes, rows


def save_accuracy_curve(rows: Sequence[dict], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=["layer", "examples", "valid_share", "val_accuracy"])
    frame.to_csv(path, index=False, float_format="%.8g")
