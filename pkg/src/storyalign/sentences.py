"""Rule-based sentence splitting.

Deliberately simple so results are identical everywhere: split after '.',
'!' or '?' when followed by whitespace and an uppercase letter, unless the
text up to the period ends with a known abbreviation.
"""

from __future__ import annotations

import re

from .errors import DegenerateInputError

# Suppresses a split when the candidate period closes one of these.
ABBREVIATIONS = ("Dr.", "Mr.", "Mrs.", "Ms.", "U.S.", "etc.", "e.g.", "i.e.")

_BOUNDARY = re.compile(r"[.!?](?=\s+[A-Z])")


def split_sentences(text: str) -> list[str]:
    """Split `text` into sentences.

    Raises DegenerateInputError if the text is empty after trimming.  The
    sentences, concatenated, cover all non-whitespace input, and splitting
    one of the returned sentences again yields it unchanged.
    """
    stripped = text.strip()
    if not stripped:
        raise DegenerateInputError("cannot split empty text")
    cuts = []
    for match in _BOUNDARY.finditer(stripped):
        end = match.end()  # index just past the punctuation mark
        if stripped[end - 1] == "." and stripped[:end].endswith(ABBREVIATIONS):
            continue
        cuts.append(end)
    sentences = []
    start = 0
    for cut in cuts:
        piece = stripped[start:cut].strip()
        if piece:
            sentences.append(piece)
        start = cut
    tail = stripped[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences
