"""Caption tokenization against a closed vocabulary.

Captions are whitespace-tokenized.  Token id 0 is reserved as the joint
null/padding token: an all-zero id sequence is the "no caption" input used
for conditioning dropout and guidance.
"""

from __future__ import annotations

import numpy as np

NULL_ID = 0


class Vocabulary:
    """Bidirectional word <-> id map with id 0 reserved for null/padding."""

    def __init__(self, words):
        deduped = sorted(set(words))
        if any((not w) or (" " in w) for w in deduped):
            raise ValueError("vocabulary words must be non-empty and contain no spaces")
        self.words = deduped
        self._index = {w: i + 1 for i, w in enumerate(deduped)}

    @property
    def size(self) -> int:
        """Number of ids including the reserved null id."""
        return len(self.words) + 1

    def encode(self, caption: str, length: int) -> np.ndarray:
        """Encode one caption to a fixed-length int array, padded with 0."""
        tokens = caption.split()
        if len(tokens) > length:
            raise ValueError(f"caption has {len(tokens)} tokens, limit is {length}: {caption!r}")
        ids = np.zeros(length, dtype=np.int64)
        for i, tok in enumerate(tokens):
            if tok not in self._index:
                raise ValueError(f"word {tok!r} is not in the vocabulary")
            ids[i] = self._index[tok]
        return ids

    def encode_batch(self, captions, length: int) -> np.ndarray:
        return np.stack([self.encode(c, length) for c in captions])

    def null_ids(self, length: int) -> np.ndarray:
        return np.zeros(length, dtype=np.int64)

    def to_list(self):
        return list(self.words)
