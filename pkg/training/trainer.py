"""
Trainer - Supervised training of the toy transformer on synthetic transcripts
SGD with weight decay; global-norm clipping and heavy-ball momentum are opt-in
knobs, off by default. Early stopping keeps the best-validation snapshot
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import ArgumentError, DataError, TrainingError
from core.model import ModelConfig, TransformerModel, Weights, init_weights
from countdown.corpus import CorpusRecord
from countdown.tokenizer import Tokenizer
from countdown.transcript import parse_transcript
from training.backprop import batch_loss, next_token_loss

Example = Tuple[List[int], int]


@dataclass
class TrainConfig:
    """Optimiser and schedule settings"""

    learning_rate: float = 0.05
    batch_size: int = 8
    max_steps: int = 4000
    weight_decay: float = 0.01
    patience: int = 10
    seed: int = 0
    eval_every: int = 50
    momentum: float = 0.0
    clip_norm: float = 0.0
    eval_generations: int = 16
    max_new_tokens: int = 200

    def validate(self) -> "TrainConfig":
        for name in ("learning_rate", "batch_size", "max_steps", "patience", "eval_every"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"TrainConfig.{name} must be positive")
        if self.weight_decay < 0 or self.clip_norm < 0 or not 0 <= self.momentum < 1:
            raise ArgumentError("weight_decay and clip_norm must be >= 0 and momentum in [0, 1)")
        return self

    @classmethod
    def from_section(cls, section: dict) -> "TrainConfig":
        known = {f.name: section[f.name] for f in fields(cls) if f.name in section and section[f.name] is not None}
        return cls(**known).validate()


@dataclass
class LossReport:
    """Metrics at one evaluation point"""

    step: int
    train_loss: float
    val_loss: float
    format_accuracy: float
    marker_accuracy: float


def marker_accuracy(model: TransformerModel, records: Sequence[CorpusRecord]) -> float:
    """Fraction of attempt markers whose word the model predicts under teacher forcing."""
    hits = total = 0
    for record in records:
        t = record.transcript
        positions = t.t_valid + t.t_invalid
        if not positions:
            continue
        logits, _ = model.forward(t.tokens)
        for pos in positions:
            hits += int(np.argmax(logits[pos]) == t.tokens[pos + 1])
            total += 1
    return hits / total if total else 0.0


def format_accuracy(
    model: TransformerModel,
    records: Sequence[CorpusRecord],
    tokenizer: Tokenizer,
    max_new: int,
) -> float:
    """Fraction of greedy generations that parse without structure loss."""
    if not records:
        return 0.0
    ok = 0
    for record in records:
        prompt = record.transcript.tokens[: record.transcript.prompt_len]
        budget = min(max_new, model.config.max_seq_len - len(prompt))
        generated = model.generate(prompt, budget, stop_token=tokenizer.eos_id)
        ok += int(not parse_transcript(generated, tokenizer).out_of_range)
    return ok / len(records)


class Trainer:
    """
    Trains a TransformerModel from scratch.
    Per-example gradients of a batch run on a thread pool and are summed in example order.
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, tokenizer: Tokenizer, threads: int = 1):
        self.model_config = model_config.validate()
        self.config = train_config.validate()
        self.tokenizer = tokenizer
        self.threads = max(1, int(threads))
        self.logger = logging.getLogger("VerifScope.Trainer")
        self.history: List[LossReport] = []

    @staticmethod
    def examples(records: Sequence[CorpusRecord]) -> List[Example]:
        return [(list(r.transcript.tokens), r.transcript.prompt_len) for r in records]

    def _batch_gradient(self, model: TransformerModel, batch: Sequence[Example], pool: Optional[ThreadPoolExecutor]):
        if pool is None:
            results = [next_token_loss(model, tokens, start) for tokens, start in batch]
        else:
            results = list(pool.map(lambda ex: next_token_loss(model, ex[0], ex[1]), batch))
        loss = float(np.mean([r[0] for r in results]))
        total = {name: np.zeros_like(t) for name, t in model.weights.items()}
        for _, grads in results:
            for name, g in grads.items():
                total[name] += g
        scale = np.float32(1.0 / len(batch))
        return loss, {name: g * scale for name, g in total.items()}

    def _apply(self, weights: Weights, grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray]) -> None:
        cfg = self.config
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        clip = np.float32(cfg.clip_norm / norm) if cfg.clip_norm and norm > cfg.clip_norm else np.float32(1.0)
        lr = np.float32(cfg.learning_rate)
        wd = np.float32(cfg.weight_decay)
        mom = np.float32(cfg.momentum)
        for name, tensor in weights.items():
            step = grads[name] * clip
            if not name.endswith("norm"):
                step = step + wd * tensor
            velocity[name] = mom * velocity[name] + step
            tensor -= lr * velocity[name]

    def train(
        self,
        train_records: Sequence[CorpusRecord],
        val_records: Sequence[CorpusRecord],
        on_eval: Optional[Callable[[LossReport], None]] = None,
    ) -> Tuple[Weights, List[LossReport]]:
        """
        Train until max_steps or until validation loss stops improving

        Args:
            train_records: Training transcripts
            val_records: Held-out transcripts for validation loss and accuracies
            on_eval: Called with every LossReport

        Returns:
            (best-validation weights, history)

        Raises:
            DataError: empty training set
            TrainingError: non-finite loss; names the step
        """
        if not train_records:
            raise DataError("Training corpus is empty")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        weights = init_weights(self.model_config, cfg.seed)
        model = TransformerModel(weights)
        velocity = {name: np.zeros_like(t) for name, t in weights.items()}
        train_examples = self.examples(train_records)
        val_examples = self.examples(val_records) if val_records else train_examples[: cfg.batch_size]
        generation_records = list(val_records)[: cfg.eval_generations]

        best: Optional[Weights] = None
        best_val = math.inf
        stale = 0
        order = rng.permutation(len(train_examples))
        cursor = 0
        recent: List[float] = []
        self.history = []
        pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        try:
            for step in range(1, cfg.max_steps + 1):
                if cursor + cfg.batch_size > len(order):
                    order = rng.permutation(len(train_examples))
                    cursor = 0
                batch = [train_examples[int(i)] for i in order[cursor:cursor + cfg.batch_size]]
                cursor += cfg.batch_size

                loss, grads = self._batch_gradient(model, batch, pool)
                if not math.isfinite(loss):
                    raise TrainingError(step, f"loss is {loss}")
                self._apply(weights, grads, velocity)
                recent.append(loss)
                self.logger.debug(f"step {step} loss {loss:.4f}")

                if step % cfg.eval_every and step != cfg.max_steps:
                    continue
                val_loss = batch_loss(model, val_examples)
                if not math.isfinite(val_loss):
                    raise TrainingError(step, f"validation loss is {val_loss}")
                report = LossReport(
                    step=step,
                    train_loss=float(np.mean(recent)),
                    val_loss=val_loss,
                    format_accuracy=format_accuracy(model, generation_records, self.tokenizer, cfg.max_new_tokens),
                    marker_accuracy=marker_accuracy(model, val_records),
                )
                recent = []
                self.history.append(report)
                self.logger.info(
                    f"step {step}: train {report.train_loss:.4f} val {val_loss:.4f} "
                    f"format {report.format_accuracy:.3f} marker {report.marker_accuracy:.3f}"
                )
                if on_eval:
                    on_eval(report)
                if val_loss < best_val:
                    best_val, best, stale = val_loss, weights.copy(), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        self.logger.info(f"Early stop at step {step}; best validation loss {best_val:.4f}")
                        break
        finally:
            if pool is not None:
                pool.shutdown()
        return (best if best is not None else weights.copy()), self.history


def train_toy_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_records: Sequence[CorpusRecord],
    val_records: Sequence[CorpusRecord],
    tokenizer: Tokenizer,
    threads: int = 1,
) -> Tuple[Weights, List[LossReport]]:
    return Trainer(model_config, train_config, tokenizer, threads).train(train_records, val_records)


def save_history(history: Sequence[LossReport], path: str) -> None:
    """Training log as CSV, one LossReport per row."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    columns = [f.name for f in fields(LossReport)]
    frame = pd.DataFrame([asdict(r) for r in history], columns=columns)
    frame.to_csv(path, index=False, float_format="%.8g")
