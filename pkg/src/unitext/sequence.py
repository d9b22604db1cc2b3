"""Modality-tagged token id sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEECH = "speech"
TEXT = "text"
MODALITIES = (SPEECH, TEXT)


@dataclass
class TokenSequence:
    utt_id: str
    modality: str
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vocab_size: int | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.vocab_size is not None and self.ids.size:
            if self.ids.min() < 0 or self.ids.max() >= self.vocab_size:
                raise IndexError(
                    f"{self.utt_id}: token id out of range for vocab size {self.vocab_size}")

    def __len__(self) -> int:
        return int(self.ids.size)

    def replace(self, ids) -> "TokenSequence":
        return TokenSequence(self.utt_id, self.modality, ids, self.vocab_size)

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (self.utt_id == other.utt_id and self.modality == other.modality
                and np.array_equal(self.ids, other.ids))
