"""
Outcomes - Grade an intervened generation against its instance
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

from countdown.instances import Instance
from countdown.tokenizer import Tokenizer
from countdown.transcript import Transcript, parse_transcript


class OutcomeLabel(Enum):
    SUCCESS = "success"
    PARTIAL_SUCCESS = "partial"
    FAILURE = "failure"
    OUT_OF_RANGE = "out_of_range"


LABELS = tuple(OutcomeLabel)


@dataclass
class Outcome:
    label: OutcomeLabel
    transcript: Transcript
    first_correct: Optional[int] = None     # marker position of the first correct attempt
    triggers: List[int] = field(default_factory=list)


def classify_outcome(tokens: Sequence[int], instance: Instance, tokenizer: Tokenizer) -> Outcome:
    """
    Label a generation

    - OutOfRange: the structure is lost (or <think> missing) before the first
      correct attempt is graded
    - Failure: the first correct attempt is marked Valid, or no attempt reaches
      the target
    - PartialSuccess: the first correct attempt is marked Invalid but a later
      claim or Valid attempt still reaches the target
    - Success: the first correct attempt is marked Invalid and nothing later
      claims a solution
    """
    t = parse_transcript(tokens, tokenizer)
    triggers = [a.marker_pos for a in t.attempts]
    correct = [a for a in t.attempts if a.value == instance.target]
    first = correct[0] if correct else None

    def outcome(label: OutcomeLabel) -> Outcome:
        return Outcome(label, t, first.marker_pos if first else None, triggers)

    if t.think_span is None:
        return outcome(OutcomeLabel.OUT_OF_RANGE)
    if t.out_of_range and (first is None or t.out_of_range_at < first.span[0]):
        return outcome(OutcomeLabel.OUT_OF_RANGE)
    if first is None or first.is_valid:
        return outcome(OutcomeLabel.FAILURE)
    later_claim = any(c.value == instance.target and c.position > first.marker_pos for c in t.claims)
    later_valid = any(a.is_valid and a.marker_pos > first.marker_pos for a in correct)
    if later_claim or later_valid:
        return outcome(OutcomeLabel.PARTIAL_SUCCESS)
    return outcome(OutcomeLabel.SUCCESS)
