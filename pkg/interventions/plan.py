"""
Intervention Plans - Head and GLU_Out ablations applied as overlays
Gated to the attempt markers of the chain of thought, or always on
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ArgumentError, PlanError
from core.model import ForwardOptions, HeadId, ModelConfig, TransformerModel
from analysis.glu import GluVectorId
from countdown import tokenizer as tok
from countdown.tokenizer import Tokenizer

logger = logging.getLogger("VerifScope.Plan")

# A completed equation whose marker parenthesis has just been opened
_TRIGGER = re.compile(r"=[ \t]*-?\d+[ \t]*\($")
_MARKER_OPEN = re.compile(r"=[ \t]*-?\d+[ \t]*\(")


class Gating(Enum):
    AT_ATTEMPT_MARKERS = "at_attempt_markers"
    ALWAYS_ON = "always_on"


class Span(Enum):
    """Positions covered by a marker-gated overlay"""
    MARKER = "marker_span"
    TRIGGER = "trigger_only"


@dataclass(frozen=True)
class InterventionPlan:
    """
    Heads whose outputs and GLU_Out vectors whose contributions are scaled by `scale`
    (0 ablates them).
    """

    heads: Tuple[HeadId, ...] = ()
    glu_vectors: Tuple[GluVectorId, ...] = ()
    gating: Gating = Gating.AT_ATTEMPT_MARKERS
    scale: float = 0.0
    name: str = ""
    span: Span = Span.MARKER

    @property
    def is_noop(self) -> bool:
        return self.scale == 1.0 or not (self.heads or self.glu_vectors)

    @property
    def size(self) -> int:
        return len(self.heads) + len(self.glu_vectors)

    def validate(self, config: ModelConfig) -> "InterventionPlan":
        """
        Raises:
            PlanError: ids outside the model or scale outside [0, 1]
        """
        if not 0.0 <= self.scale <= 1.0:
            raise PlanError(f"Plan {self.name!r}: scale {self.scale} outside [0, 1]")
        for unit in list(self.heads) + list(self.glu_vectors):
            try:
                unit.check(config)
            except (IndexError, ArgumentError) as e:
                raise PlanError(f"Plan {self.name!r}: {e}") from e
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "heads": [str(h) for h in self.heads],
            "glu_vectors": [[v.layer, v.row] for v in self.glu_vectors],
            "gating": self.gating.value,
            "scale": self.scale,
            "span": self.span.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InterventionPlan":
        return cls(
            heads=tuple(HeadId.parse(h) for h in data.get("heads", [])),
            glu_vectors=tuple(GluVectorId(int(l), int(r)) for l, r in data.get("glu_vectors", [])),
            gating=Gating(data.get("gating", Gating.AT_ATTEMPT_MARKERS.value)),
            scale=float(data.get("scale", 0.0)),
            name=str(data.get("name", "")),
            span=Span(data.get("span", Span.MARKER.value)),
        )


# ----------------------------------------------------------------------
# Triggers
# ----------------------------------------------------------------------

def _open_think_text(text: str) -> Optional[str]:
    """Text of the think region if it is still open at the end of `text`."""
    start = text.rfind(tok.THINK_OPEN)
    if start < 0:
        return None
    region = text[start + len(tok.THINK_OPEN):]
    if tok.THINK_CLOSE in region:
        return None
    return region


def detect_trigger(prefix: str) -> bool:
    """
    True when the prefix ends with a completed equation followed by the
    parenthesis that opens its marker, inside an open think region
    """
    region = _open_think_text(prefix)
    return region is not None and _TRIGGER.search(region) is not None


def in_marker_span(prefix: str) -> bool:
    """True from the marker's "(" up to the last token before its closing ")"."""
    region = _open_think_text(prefix)
    if region is None:
        return False
    last = None
    for last in _MARKER_OPEN.finditer(region):
        pass
    if last is None:
        return False
    tail = region[last.end() - 1:]
    return tail.count("(") > tail.count(")")


def make_gate(tokenizer: Tokenizer, span: Span = Span.MARKER) -> Callable[[Sequence[int]], bool]:
    """Gate over token prefixes for marker-gated overlays."""
    test = in_marker_span if span is Span.MARKER else detect_trigger

    def gate(prefix: Sequence[int]) -> bool:
        return test(tokenizer.decode(prefix))

    return gate


def plan_positions(tokens: Sequence[int], plan: InterventionPlan, tokenizer: Tokenizer) -> Optional[np.ndarray]:
    """Boolean mask of the positions a plan covers in a fixed sequence; None means all."""
    if plan.gating is Gating.ALWAYS_ON:
        return None
    gate = make_gate(tokenizer, plan.span)
    return np.array([gate(tokens[: i + 1]) for i in range(len(tokens))], dtype=bool)


# ----------------------------------------------------------------------
# Overlaid model
# ----------------------------------------------------------------------

class PlannedModel:
    """
    A model seen through an intervention plan.
    The base weights are shared and never written to.
    """

    def __init__(self, model: TransformerModel, plan: InterventionPlan, tokenizer: Tokenizer):
        self.model = model
        self.plan = plan.validate(model.config)
        self.tokenizer = tokenizer

    def options(self, **extra) -> ForwardOptions:
        if self.plan.is_noop:
            return ForwardOptions(**extra)
        gate = make_gate(self.tokenizer, self.plan.span) if self.plan.gating is Gating.AT_ATTEMPT_MARKERS else None
        return ForwardOptions(plan=self.plan, gate=gate, **extra)

    def forward(self, tokens: Sequence[int], capture=frozenset()):
        if self.plan.is_noop:
            return self.model.forward(tokens, ForwardOptions(capture=frozenset(capture)))
        positions = plan_positions(tokens, self.plan, self.tokenizer)
        opts = ForwardOptions(capture=frozenset(capture), plan=self.plan, plan_positions=positions)
        return self.model.forward(tokens, opts)

    def generate(self, prompt: Sequence[int], max_new: int, stop_token: Optional[int] = None) -> List[int]:
        return self.model.generate(prompt, max_new, self.options(), stop_token=stop_token)


def apply_plan(model: TransformerModel, plan: InterventionPlan, tokenizer: Tokenizer) -> PlannedModel:
    """
    Overlay view of `model` under `plan`

    Raises:
        PlanError: invalid ids or scale
    """
    return PlannedModel(model, plan, tokenizer)


def intervened_generate(
    model: TransformerModel,
    plan: InterventionPlan,
    prompt: Sequence[int],
    max_new: int,
    tokenizer: Tokenizer,
) -> List[int]:
    """Greedy decoding with the plan toggled per position by its gating."""
    max_new = min(max_new, model.config.max_seq_len - len(prompt))
    return apply_plan(model, plan, tokenizer).generate(prompt, max_new, stop_token=tokenizer.eos_id)
