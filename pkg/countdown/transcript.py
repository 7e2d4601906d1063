"""
Transcript - Structured chain-of-thought synthesis and parsing
The parser is total: malformed generations come back as data with flags set
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import EvaluationError, ParseError
from countdown import tokenizer as tok
from countdown.arithmetic import as_chain, evaluate_left_to_right
from countdown.instances import Instance, generation_prompt
from countdown.solver import brute_force_solve, enumerate_chains
from countdown.tokenizer import Tokenizer, char_to_token

logger = logging.getLogger("VerifScope.Transcript")

_MARKER = re.compile(r"\((?:(?P<valid>this works)|not \(?(?P<shown>-?\d+)\)?)\)")
_EQUATION = re.compile(r"[\d(][\d\s+\-*/()=]*$")
_CLAIM = re.compile(r"(?:answer|equation)[^=\n]*?\bis\s+(?P<expr>[\d(][\d\s+\-*/()]*[\d)])")
_PROSE = re.compile(r"^[A-Z][A-Za-z0-9 ,'\-]*(?:[.:][ A-Za-z0-9,'\-]*)*[.:]$")
_NUMBERS = re.compile(r"\[(?P<list>[\d, ]+)\]")


class Marker(Enum):
    VALID = "this works"
    INVALID = "not"


@dataclass(frozen=True)
class Attempt:
    """
    One marked attempt.

    value is the exact evaluation of the expression; claimed is the last number
    written after "="; marker_pos is the token index of the "(" that opens the
    marker, whose next token is "this" or "not".
    """

    expression: str
    value: int
    claimed: Optional[int]
    marker: Marker
    shown: Optional[int]
    span: Tuple[int, int]
    marker_pos: int

    @property
    def is_valid(self) -> bool:
        return self.marker is Marker.VALID


@dataclass(frozen=True)
class Claim:
    """A solution claim ("the answer is E" or an answer block)"""

    expression: str
    value: Optional[int]
    position: int
    in_answer_block: bool = False


@dataclass
class Transcript:
    tokens: List[int]
    operands: Optional[Tuple[int, ...]] = None
    target: Optional[int] = None
    t_ans: Optional[int] = None
    think_span: Optional[Tuple[int, int]] = None
    think_closed: bool = False
    attempts: List[Attempt] = field(default_factory=list)
    claims: List[Claim] = field(default_factory=list)
    answer: Optional[str] = None
    out_of_range: bool = False
    out_of_range_at: Optional[int] = None
    truncated: bool = False

    @property
    def prompt_len(self) -> int:
        """Tokens up to and including the opening think tag."""
        return self.think_span[0] if self.think_span else len(self.tokens)

    @property
    def t_valid(self) -> List[int]:
        return [a.marker_pos for a in self.attempts if a.marker is Marker.VALID]

    @property
    def t_invalid(self) -> List[int]:
        return [a.marker_pos for a in self.attempts if a.marker is Marker.INVALID]

    @property
    def instance(self) -> Optional[Instance]:
        if self.operands is None or self.target is None:
            return None
        return Instance(self.operands, self.target)

    def correct_attempts(self) -> List[Attempt]:
        if self.target is None:
            return []
        return [a for a in self.attempts if a.value == self.target]

    def is_validated(self) -> bool:
        """Solved and verified: some correct attempt carries the Valid marker and the format held."""
        return not self.out_of_range and any(a.is_valid for a in self.correct_attempts())


def _evaluate(expression: str) -> Optional[int]:
    try:
        return evaluate_left_to_right(expression)
    except (ParseError, EvaluationError):
        return None


def _last_number(text: str) -> Optional[int]:
    try:
        return int(text.strip())
    except ValueError:
        match = re.search(r"-?\d+\s*$", text)
        return int(match.group(0)) if match else None


class _ThinkParser:
    """Segment the think region on attempt markers."""

    def __init__(self, transcript: Transcript, text: str, offsets: List[int], base_char: int):
        self.t = transcript
        self.text = text
        self.offsets = offsets
        self.base_char = base_char  # character offset of the think region

    def token_at(self, char: int) -> int:
        return char_to_token(self.offsets, self.base_char + char)

    def flag(self, char: int) -> None:
        if not self.t.out_of_range:
            self.t.out_of_range = True
            self.t.out_of_range_at = self.token_at(char)

    def segment(self, start: int, end: int) -> None:
        """Classify free text between attempts; non-grammar text flags out_of_range."""
        for line_match in re.finditer(r"[^\n]+", self.text[start:end]):
            line = line_match.group(0)
            if not line.strip():
                continue
            line_start = start + line_match.start() + (len(line) - len(line.lstrip()))
            claim = _CLAIM.search(line)
            if claim:
                expr = claim.group("expr").strip()
                self.t.claims.append(Claim(expr, _evaluate(expr), self.token_at(start + line_match.start() + claim.start())))
                continue
            if _PROSE.match(line.strip()):
                continue
            self.flag(line_start)

    def run(self) -> None:
        cursor = 0
        for marker in _MARKER.finditer(self.text):
            before = self.text[cursor:marker.start()]
            line_start = before.rfind("\n") + 1
            line = before[line_start:].rstrip()
            eq = _EQUATION.search(line)
            attempt = None
            if eq and "=" in eq.group(0):
                parts = eq.group(0).split("=")
                expression = parts[0].strip()
                value = _evaluate(expression)
                if value is not None:
                    eq_char = cursor + line_start + eq.start()
                    valid = marker.group("valid") is not None
                    attempt = Attempt(
                        expression=expression,
                        value=value,
                        claimed=_last_number(parts[-1]),
                        marker=Marker.VALID if valid else Marker.INVALID,
                        shown=None if valid else int(marker.group("shown")),
                        span=(self.token_at(eq_char), self.token_at(marker.end() - 1) + 1),
                        marker_pos=self.token_at(marker.start()),
                    )
                    self.segment(cursor, eq_char)
            if attempt is None:
                self.segment(cursor, marker.end())
            else:
                self.t.attempts.append(attempt)
            cursor = marker.end()

        tail = self.text[cursor:]
        if not self.t.think_closed:
            last_nl = tail.rstrip("\n").rfind("\n")
            last_line = tail[last_nl + 1:].strip()
            if last_line and not (_CLAIM.search(last_line) or _PROSE.match(last_line)):
                self.segment(cursor, cursor + last_nl + 1)
                self.t.truncated = True
                return
        self.segment(cursor, len(self.text))


def parse_transcript(tokens: Sequence[int], tokenizer: Tokenizer) -> Transcript:
    """
    Extract attempts, markers, claims and timesteps from a token sequence

    Never raises on malformed content: missing <think> sets out_of_range,
    text outside the attempt grammar sets out_of_range and out_of_range_at,
    an unfinished last attempt sets truncated.
    """
    tokens = [int(t) for t in tokens]
    if tokenizer.eos_id in tokens:
        tokens = tokens[: tokens.index(tokenizer.eos_id) + 1]
    transcript = Transcript(tokens=tokens)
    text, offsets = tokenizer.decode_with_offsets(tokens)

    target_prefix = tokenizer.token_id(tok.TARGET_PREFIX)
    if target_prefix in tokens:
        i = tokens.index(target_prefix)
        if i + 1 < len(tokens):
            piece = tokenizer.piece(tokens[i + 1])
            if piece.isdigit():
                transcript.t_ans = i + 1
                transcript.target = int(piece)
        numbers = _NUMBERS.search(text[: offsets[i]])
        if numbers:
            transcript.operands = tuple(int(n) for n in numbers.group("list").split(",") if n.strip())

    think_open = tokenizer.token_id(tok.THINK_OPEN)
    think_close = tokenizer.token_id(tok.THINK_CLOSE)
    if think_open not in tokens:
        transcript.out_of_range = True
        transcript.out_of_range_at = len(tokens)
        return transcript
    start = tokens.index(think_open) + 1
    end = tokens.index(think_close, start) if think_close in tokens[start:] else len(tokens)
    transcript.think_closed = end < len(tokens)
    transcript.think_span = (start, end)

    region_end_char = offsets[end] if end < len(tokens) else len(text)
    if not transcript.think_closed and tokens[-1] == tokenizer.eos_id:
        region_end_char = offsets[-1]
    base_char = offsets[start] if start < len(tokens) else len(text)
    _ThinkParser(transcript, text[base_char:region_end_char], offsets, base_char).run()

    if transcript.think_closed:
        after = text[offsets[end]:]
        block = re.search(re.escape(tok.ANSWER_OPEN) + r"(?P<body>.*?)" + re.escape(tok.ANSWER_CLOSE), after, re.S)
        if block:
            transcript.answer = block.group("body").strip()
            position = char_to_token(offsets, offsets[end] + block.start())
            transcript.claims.append(Claim(transcript.answer, _evaluate(transcript.answer), position, True))
    return transcript


def parse_text(text: str, tokenizer: Tokenizer) -> Transcript:
    return parse_transcript(tokenizer.encode(text), tokenizer)


def render_attempt(expression: str, value: int, target: int) -> str:
    """Attempt line with its marker; chains are written out step by step."""
    chain = as_chain(expression)
    worked = chain.render_steps() if chain is not None else f"{expression} = {value}"
    marker = "(this works)" if value == target else f"(not {target})"
    return f"{worked} {marker}"


def render_completion(witness: str, failures: Sequence[Tuple[str, int]], target: int) -> str:
    lines = [render_attempt(expr, value, target) for expr, value in failures]
    lines.append(render_attempt(witness, target, target))
    body = "\n".join(lines)
    return f"\n{body}\n{tok.THINK_CLOSE} {tok.ANSWER_OPEN} {witness} {tok.ANSWER_CLOSE}{tok.EOS}"


def synthesize_transcript(inst: Instance, rng: np.random.Generator, n_failures: int, tokenizer: Tokenizer) -> Transcript:
    """
    Build a training transcript: failed attempts, then the witness marked valid

    Args:
        inst: Solvable instance
        rng: Seeded generator choosing the failed attempts
        n_failures: Requested failures; fewer when not enough wrong chains exist
        tokenizer: Vocabulary used to encode the sequence

    Returns:
        The parsed transcript of prompt plus completion
    """
    witness = brute_force_solve(inst.operands, inst.target)
    if witness is None:
        raise ParseError(f"Instance {inst} has no solution")
    wrong = [(c.expression, v) for c, v in enumerate_chains(inst.operands) if v != inst.target]
    count = min(n_failures, len(wrong))
    picks = rng.choice(len(wrong), size=count, replace=False) if count else []
    failures = [wrong[int(i)] for i in picks]
    text = generation_prompt(inst) + render_completion(witness, failures, inst.target)
    return parse_transcript(tokenizer.encode(text), tokenizer)
