"""
Tokenizer - Character-level vocabulary with reserved words and whole-number tokens
Every integer 0..999 is one token so target numbers occupy a single position
"""

import bisect
import re
import string
from typing import Dict, List, Sequence, Tuple

from core.errors import VocabularyError

PAD = "<|pad|>"
EOS = "<|endoftext|>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
VALID_WORD = "this"
INVALID_WORD = "not"
WORKS_WORD = "works"

SYSTEM_PREFIX = (
    "A conversation between User and Assistant. The user asks a question, and the Assistant "
    "solves it. The assistant first thinks about the reasoning process and then provides the "
    "user with the answer.\nUser: Using the numbers "
)
TARGET_PREFIX = ", create an equation that equals "
INSTRUCTIONS = (
    ". You can use basic arithmetic operations (+, -, *, /) and each number can only be used "
    "once. Show your work in <think> </think> tags. And return the final answer in "
    "<answer> </answer> tags, for example <answer> (1 + 2) / 3 </answer>."
)
ASSISTANT_PREFIX = "\nAssistant: Let me solve this step by step.\n"

RESERVED = [
    THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, VALID_WORD, INVALID_WORD, WORKS_WORD,
    SYSTEM_PREFIX, TARGET_PREFIX, INSTRUCTIONS, ASSISTANT_PREFIX,
]

MAX_NUMBER_TOKEN = 999


class Tokenizer:
    """
    Deterministic longest-match tokenizer

    Vocabulary order: specials, reserved strings, newline plus printable
    non-digit ASCII, then the numbers 0..999.
    """

    def __init__(self):
        pieces = [PAD, EOS] + RESERVED + ["\n"]
        pieces += [c for c in string.printable if c in string.ascii_letters + string.punctuation + " "]
        pieces += [str(n) for n in range(MAX_NUMBER_TOKEN + 1)]
        self.pieces: List[str] = pieces
        self.ids: Dict[str, int] = {p: i for i, p in enumerate(pieces)}
        literals = sorted([EOS] + RESERVED, key=len, reverse=True)
        self._pattern = re.compile(
            "(?P<lit>" + "|".join(re.escape(s) for s in literals) + ")|(?P<num>[0-9]+)|(?P<ch>[\\s\\S])"
        )

    @property
    def vocab_size(self) -> int:
        return len(self.pieces)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    def token_id(self, piece: str) -> int:
        if piece not in self.ids:
            raise VocabularyError(f"Not a vocabulary piece: {piece!r}")
        return self.ids[piece]

    def number_id(self, n: int) -> int:
        if not 0 <= n <= MAX_NUMBER_TOKEN:
            raise VocabularyError(f"{n} has no single number token")
        return self.ids[str(n)]

    def _number_pieces(self, run: str) -> List[str]:
        if len(run) <= 3 and (run == "0" or not run.startswith("0")):
            return [run]
        return list(run)

    def encode_with_offsets(self, text: str) -> Tuple[List[int], List[int]]:
        """
        Encode text

        Returns:
            (token ids, character offset at which each token starts)

        Raises:
            VocabularyError: a character outside the vocabulary
        """
        ids: List[int] = []
        offsets: List[int] = []
        for match in self._pattern.finditer(text):
            if match.group("num") is not None:
                pos = match.start()
                for piece in self._number_pieces(match.group("num")):
                    ids.append(self.ids[piece])
                    offsets.append(pos)
                    pos += len(piece)
                continue
            piece = match.group(0)
            if piece not in self.ids:
                raise VocabularyError(f"Character {piece!r} at offset {match.start()} is not in the vocabulary")
            ids.append(self.ids[piece])
            offsets.append(match.start())
        return ids, offsets

    def encode(self, text: str) -> List[int]:
        return self.encode_with_offsets(text)[0]

    def piece(self, token: int) -> str:
        if not 0 <= token < len(self.pieces):
            raise VocabularyError(f"Token id {token} outside vocabulary of size {len(self.pieces)}")
        return self.pieces[token]

    def decode(self, tokens: Sequence[int]) -> str:
        return "".join(self.piece(int(t)) for t in tokens)

    def decode_with_offsets(self, tokens: Sequence[int]) -> Tuple[str, List[int]]:
        """Decoded text and the character offset of every token."""
        offsets, parts, pos = [], [], 0
        for t in tokens:
            p = self.piece(int(t))
            offsets.append(pos)
            parts.append(p)
            pos += len(p)
        return "".join(parts), offsets


def char_to_token(offsets: Sequence[int], char_index: int) -> int:
    """Index of the token covering a character position."""
    return bisect.bisect_right(offsets, char_index) - 1
