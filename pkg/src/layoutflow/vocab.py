"""Closed toy vocabulary: color/shape words plus the scene words used in captions.

Color values are exact multiples of 1/255 so a render -> PNG -> load round
trip reproduces them bit-for-bit.
"""

from __future__ import annotations

import re

# name -> RGB in [0, 1], all channels multiples of 1/255
COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 128 / 255, 0.0),
    "purple": (128 / 255, 0.0, 128 / 255),
}

BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (128 / 255, 128 / 255, 128 / 255),
}

SHAPES: tuple[str, ...] = ("circle", "square", "triangle")

_SCENE_WORDS: tuple[str, ...] = ("a", "an", "on", "and", "background")

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
UNK_TOKEN = "<unk>"

WORDS: tuple[str, ...] = (
    (PAD_TOKEN, BOS_TOKEN, UNK_TOKEN)
    + _SCENE_WORDS
    + tuple(COLORS)
    + SHAPES
    + tuple(BACKGROUNDS)
)

WORD_TO_ID: dict[str, int] = {w: i for i, w in enumerate(WORDS)}

PAD_ID = WORD_TO_ID[PAD_TOKEN]
BOS_ID = WORD_TO_ID[BOS_TOKEN]
UNK_ID = WORD_TO_ID[UNK_TOKEN]

VOCAB_SIZE = len(WORDS)

COLOR_IDS = frozenset(WORD_TO_ID[w] for w in COLORS)
SHAPE_IDS = frozenset(WORD_TO_ID[w] for w in SHAPES)

_TOKEN_RE = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[int]:
    """Map text to vocabulary ids; words outside the vocabulary become UNK."""
    return [WORD_TO_ID.get(w, UNK_ID) for w in _TOKEN_RE.findall(text.lower())]


def encode_prompt(caption: str) -> list[int]:
    """Tokenize a caption with the leading begin-of-prompt marker."""
    return [BOS_ID] + tokenize(caption)


def article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"
