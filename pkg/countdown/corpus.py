"""
Corpus - Synthetic training transcripts on disk
corpus.jsonl holds one record per line; corpus.index.yaml holds the timesteps
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import yaml

from core.errors import DependencyError, FormatError
from countdown.instances import Instance, generate_instances, generation_prompt
from countdown.tokenizer import Tokenizer
from countdown.transcript import Transcript, parse_transcript, synthesize_transcript

CORPUS_FILE = "corpus.jsonl"
INDEX_FILE = "corpus.index.yaml"
SPLITS = ("train", "val", "test")


@dataclass
class CorpusRecord:
    """One synthetic transcript"""

    id: str
    instance: Instance
    prompt: str
    completion: str
    split: str
    transcript: Optional[Transcript] = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "operands": list(self.instance.operands),
            "target": self.instance.target,
            "prompt": self.prompt,
            "completion": self.completion,
            "split": self.split,
        }


class Corpus:
    """
    In-memory corpus with split views.
    Records keep their parsed transcript so timesteps come from one parser.
    """

    def __init__(self, records: List[CorpusRecord], digest: str = ""):
        self.records = records
        self.digest = digest
        self.logger = logging.getLogger("VerifScope.Corpus")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> List[CorpusRecord]:
        return [r for r in self.records if r.split == name]

    def stats(self) -> Dict[str, int]:
        counts = {name: len(self.split(name)) for name in SPLITS}
        counts["attempts"] = sum(len(r.transcript.attempts) for r in self.records if r.transcript)
        return counts


def _assign_splits(count: int, val_fraction: float, test_fraction: float) -> List[str]:
    n_test = int(round(count * test_fraction))
    n_val = int(round(count * val_fraction))
    n_train = count - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def build_corpus(
    seed: int,
    count: int,
    tokenizer: Tokenizer,
    n_failures_max: int = 3,
    operand_counts: Sequence[int] = (3, 4),
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    digest: str = "",
) -> Corpus:
    """
    Generate instances and their transcripts deterministically from one seed

    Args:
        seed: Seed of the instance and attempt stream
        count: Number of records
        tokenizer: Vocabulary used to parse each transcript
        n_failures_max: Failed attempts per transcript are drawn from 0..n_failures_max
        operand_counts: Operand counts to draw from
    """
    logger = logging.getLogger("VerifScope.Corpus")
    rng = np.random.default_rng(seed)
    instances = generate_instances(rng, count, operand_counts)
    splits = _assign_splits(count, val_fraction, test_fraction)
    records = []
    for i, (inst, split) in enumerate(zip(instances, splits)):
        n_failures = int(rng.integers(0, n_failures_max + 1))
        transcript = synthesize_transcript(inst, rng, n_failures, tokenizer)
        text = tokenizer.decode(transcript.tokens)
        prompt = generation_prompt(inst)
        records.append(CorpusRecord(f"s{i:06d}", inst, prompt, text[len(prompt):], split, transcript))
    logger.info(f"Built corpus of {count} transcripts from seed {seed}")
    return Corpus(records, digest)


def save_corpus(corpus: Corpus, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, CORPUS_FILE), "w", encoding="utf-8") as f:
        for record in corpus.records:
            f.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    index = {"digest": corpus.digest, "samples": {}}
    for record in corpus.records:
        t = record.transcript
        index["samples"][record.id] = {
            "t_ans": t.t_ans,
            "t_valid": t.t_valid,
            "t_invalid": t.t_invalid,
        }
    with open(os.path.join(directory, INDEX_FILE), "w", encoding="utf-8") as f:
        yaml.safe_dump(index, f, sort_keys=True)
    corpus.logger.info(f"Saved {len(corpus)} records to {directory}")


def load_corpus(directory: str, tokenizer: Tokenizer) -> Corpus:
    """
    Load and re-parse a corpus

    Raises:
        DependencyError: corpus files absent
        FormatError: a record disagrees with the sidecar index
    """
    path = os.path.join(directory, CORPUS_FILE)
    index_path = os.path.join(directory, INDEX_FILE)
    if not os.path.exists(path) or not os.path.exists(index_path):
        raise DependencyError(path, "gen-data")
    with open(index_path, "r", encoding="utf-8") as f:
        index = yaml.safe_load(f) or {}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: {e}") from e
            inst = Instance.from_dict(data)
            transcript = parse_transcript(tokenizer.encode(data["prompt"] + data["completion"]), tokenizer)
            entry = index.get("samples", {}).get(data["id"])
            if entry is None or entry["t_valid"] != transcript.t_valid or entry["t_invalid"] != transcript.t_invalid:
                raise FormatError(f"{path}:{line_no}: record {data['id']} disagrees with {INDEX_FILE}")
            records.append(CorpusRecord(data["id"], inst, data["prompt"], data["completion"], data.get("split", "train"), transcript))
    return Corpus(records, index.get("digest", ""))


def token_sequences(records: Iterable[CorpusRecord]) -> List[List[int]]:
    return [list(r.transcript.tokens) for r in records]
