"""
Probe Dataset - (hidden state, marker label) pairs at pre-marker timesteps
Labels come from the parsed markers: 1 for "this", 0 for "not"
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DataError
from core.model import TransformerModel
from countdown.corpus import CorpusRecord
from countdown.transcript import Transcript
from traces.capture import capture
from traces.store import TraceStore
from traces.trace import ActivationTrace, CaptureField

logger = logging.getLogger("VerifScope.ProbeDataset")

VALID_LABEL = 1
INVALID_LABEL = 0


@dataclass
class ProbeDataset:
    """Examples from one layer; x is (n, d), y is (n,) in {0, 1}."""

    x: np.ndarray
    y: np.ndarray
    layer: int
    sample_ids: List[str] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def labels(self) -> List[int]:
        return [int(v) for v in self.y]

    def class_counts(self) -> Dict[int, int]:
        return {label: int(np.sum(self.y == label)) for label in (INVALID_LABEL, VALID_LABEL)}

    def subset(self, index: np.ndarray) -> "ProbeDataset":
        index = np.asarray(index, dtype=np.int64)
        return ProbeDataset(
            x=self.x[index],
            y=self.y[index],
            layer=self.layer,
            sample_ids=[self.sample_ids[int(i)] for i in index] if self.sample_ids else [],
            skipped=self.skipped,
        )

    def balance(self, rng: np.random.Generator) -> "ProbeDataset":
        """Downsample the majority label to the size of the minority one."""
        counts = self.class_counts()
        n = min(counts.values())
        if n == 0:
            return self
        keep = []
        for label in (INVALID_LABEL, VALID_LABEL):
            idx = np.flatnonzero(self.y == label)
            keep.extend(int(i) for i in rng.choice(idx, size=n, replace=False))
        return self.subset(np.sort(np.array(keep, dtype=np.int64)))

    def split(self, val_size: int, rng: np.random.Generator) -> Tuple["ProbeDataset", "ProbeDataset"]:
        """
        Shuffle and hold out up to val_size examples

        At most half of the data goes to validation so training always keeps examples.
        """
        order = rng.permutation(len(self))
        n_val = min(int(val_size), len(self) // 2)
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))

    @classmethod
    def concat(cls, parts: Sequence["ProbeDataset"], layer: int) -> "ProbeDataset":
        parts = [p for p in parts if len(p)]
        skipped = sum(p.skipped for p in parts)
        if not parts:
            return cls(np.zeros((0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64), layer, [], skipped)
        return cls(
            x=np.concatenate([p.x for p in parts]),
            y=np.concatenate([p.y for p in parts]),
            layer=layer,
            sample_ids=[s for p in parts for s in p.sample_ids],
            skipped=skipped,
        )


def marker_examples(transcript: Transcript) -> List[Tuple[int, int]]:
    """(timestep, label) for every attempt, in transcript order."""
    return [(a.marker_pos, VALID_LABEL if a.is_valid else INVALID_LABEL) for a in transcript.attempts]


def _assemble(rows: List[np.ndarray], labels: List[int], ids: List[str], layer: int, skipped: int, d: int) -> ProbeDataset:
    x = np.stack(rows).astype(np.float32) if rows else np.zeros((0, d), dtype=np.float32)
    return ProbeDataset(x=x, y=np.array(labels, dtype=np.int64), layer=layer, sample_ids=ids, skipped=skipped)


def build_probe_dataset(
    traces: Sequence[ActivationTrace],
    transcripts: Sequence[Transcript],
    layer: int,
    sample_ids: Optional[Sequence[str]] = None,
) -> ProbeDataset:
    """
    One example per attempt: the residual stream after block `layer` at the
    marker position, labelled by the marker

    Args:
        traces: Traces holding hidden states
        transcripts: Parsed transcripts, aligned with traces
        layer: Block index
        sample_ids: Optional ids; defaults to the list index

    Returns:
        ProbeDataset; transcripts without attempts are skipped and counted
    """
    if len(traces) != len(transcripts):
        raise DataError(f"{len(traces)} traces but {len(transcripts)} transcripts")
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(traces))]
    rows, labels, row_ids = [], [], []
    skipped = 0
    d = 0
    for sample_id, trace, transcript in zip(ids, traces, transcripts):
        if trace.hidden is None:
            raise DataError(f"Trace {sample_id} has no hidden states")
        if not 0 <= layer < trace.hidden.shape[0]:
            raise DataError(f"Trace {sample_id} has no layer {layer}")
        d = trace.hidden.shape[-1]
        examples = marker_examples(transcript)
        if not examples:
            skipped += 1
            continue
        for t, label in examples:
            rows.append(trace.hidden[layer, t])
            labels.append(label)
            row_ids.append(sample_id)
    if skipped:
        logger.warning(f"Layer {layer}: skipped {skipped} transcripts without attempts")
    return _assemble(rows, labels, row_ids, layer, skipped, d)


def dataset_from_store(store: TraceStore, transcripts: Dict[str, Transcript], layer: int) -> ProbeDataset:
    """Like build_probe_dataset, reading only the one layer chunk per sample."""
    rows, labels, row_ids = [], [], []
    skipped = 0
    d = 0
    for sample_id in sorted(transcripts):
        examples = marker_examples(transcripts[sample_id])
        if not examples:
            skipped += 1
            continue
        hidden = store.load_layer(sample_id, layer, "hidden")
        d = hidden.shape[-1]
        for t, label in examples:
            rows.append(hidden[t])
            labels.append(label)
            row_ids.append(sample_id)
    if skipped:
        logger.warning(f"Layer {layer}: skipped {skipped} transcripts without attempts")
    return _assemble(rows, labels, row_ids, layer, skipped, d)


def corpus_marker_datasets(
    model: TransformerModel,
    records: Sequence[CorpusRecord],
    layers: Sequence[int],
) -> Dict[int, ProbeDataset]:
    """
    Probe datasets from teacher-forced corpus transcripts, all layers from one pass per record
    """
    rows: Dict[int, List[np.ndarray]] = {layer: [] for layer in layers}
    labels, row_ids = [], []
    skipped = 0
    for record in records:
        examples = marker_examples(record.transcript)
        if not examples:
            skipped += 1
            continue
        trace = capture(model, record.transcript.tokens, [CaptureField.HIDDEN_STATES])
        positions = [t for t, _ in examples]
        for layer in layers:
            rows[layer].extend(trace.hidden[layer, positions])
        labels.extend(label for _, label in examples)
        row_ids.extend(record.id for _ in examples)
    d = model.config.d_model
    return {layer: _assemble(rows[layer], list(labels), list(row_ids), layer, skipped, d) for layer in layers}
