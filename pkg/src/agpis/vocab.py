"""Closed 64-token vocabulary shared by titles, feedback and the decoder."""

from __future__ import annotations

from typing import Iterable, Sequence

PAD, SEP, EOT, UNK = "<pad>", "<sep>", "<eot>", "<unk>"

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink")
SIZES = ("small", "medium", "large")
RULE_WORDS = ("logo", "blur", "duplicate", "color", "order")
DIGITS = tuple(str(i) for i in range(10))

_WORDS = (
    [PAD, SEP, EOT, UNK, "yes", "image"]
    + list(RULE_WORDS)
    + list(DIGITS)
    + list(SHAPES)
    + list(COLORS)
    + list(SIZES)
    + ["product", "view", "front", "back", "detail", "with", "and", "the", "a", "of"]
)
VOCAB: tuple[str, ...] = tuple(_WORDS + [f"<unused{i}>" for i in range(64 - len(_WORDS))])
VOCAB_SIZE = len(VOCAB)
assert VOCAB_SIZE == 64 and len(set(VOCAB)) == 64

TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, SEP_ID, EOT_ID, UNK_ID = (TOKEN_ID[w] for w in (PAD, SEP, EOT, UNK))


def encode(words: Iterable[str]) -> list[int]:
    out = []
    for w in words:
        if w not in TOKEN_ID:
            raise KeyError(f"word {w!r} is not in the vocabulary")
        out.append(TOKEN_ID[w])
    return out


def decode(ids: Sequence[int]) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


def tokenize(text: str) -> list[int]:
    """Whitespace tokenizer over the closed vocabulary (case-insensitive)."""
    return encode(text.lower().split())


def detokenize(ids: Sequence[int]) -> str:
    return " ".join(decode(ids))
