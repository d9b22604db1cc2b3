"""Span masking plans and token corruption for masked-token pre-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .rng import stream
from .sequence import TokenSequence

FULL_MASK = "full-mask"
BERT_MIX = "80-10-10"

# corruption codes stored per masked position
MASKED, RANDOM, KEPT = 0, 1, 2


@dataclass
class MaskConfig:
    start_prob: float = 0.08
    span_mean: float = 10.0
    span_std: float = 10.0
    policy: str = FULL_MASK

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ConfigError(f"start_prob must lie in [0, 1], got {self.start_prob}")
        if self.span_std < 0:
            raise ConfigError("span_std must be non-negative")
        if self.policy not in (FULL_MASK, BERT_MIX):
            raise ConfigError(f"unknown corruption policy {self.policy!r}")


@dataclass
class MaskPlan:
    length: int
    positions: np.ndarray
    targets: np.ndarray | None = None
    corruption: np.ndarray | None = None

    @property
    def fraction(self) -> float:
        return self.positions.size / self.length if self.length else 0.0

    def __len__(self) -> int:
        return int(self.positions.size)


def _span_lengths(rng: np.random.Generator, n: int, config: MaskConfig) -> np.ndarray:
    draws = rng.normal(config.span_mean, config.span_std, size=n)
    return np.maximum(np.rint(draws), 1).astype(np.int64)


def sample_mask(length: int, config: MaskConfig | None = None, seed: int = 0) -> MaskPlan:
    """Pick span starts with ``start_prob`` and extend each one to the right.

    Span lengths are normal draws rounded to the nearest integer and clamped
    to at least 1; spans are cut at the sequence end and overlaps merge.
    """
    config = config or MaskConfig()
    if length < 0:
        raise ContractError("sequence length must be non-negative")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(length) < config.start_prob)
    spans = np.minimum(_span_lengths(rng, starts.size, config), length - starts)
    # difference array: +1 at each start, -1 one past each span end
    delta = np.zeros(length + 1, dtype=np.int64)
    np.add.at(delta, starts, 1)
    np.add.at(delta, starts + spans, -1)
    covered = np.cumsum(delta[:length]) > 0
    return MaskPlan(length, np.flatnonzero(covered))


def apply_mask(seq: TokenSequence, plan: MaskPlan, mask_token_id: int, vocab_size: int,
               seed: int = 0, policy: str = FULL_MASK) -> TokenSequence:
    """Corrupt the masked positions of ``seq``; fills ``plan.targets`` first."""
    if plan.length != len(seq):
        raise ContractError(f"mask plan covers {plan.length} tokens, sequence has {len(seq)}")
    plan.targets = seq.ids[plan.positions].copy()
    out = seq.ids.copy()
    n = plan.positions.size
    if policy == FULL_MASK:
        plan.corruption = np.full(n, MASKED, dtype=np.int8)
        out[plan.positions] = mask_token_id
    elif policy == BERT_MIX:
        rng = np.random.default_rng(seed)
        u = rng.random(n)
        choice = np.where(u < 0.8, MASKED, np.where(u < 0.9, RANDOM, KEPT)).astype(np.int8)
        random_ids = rng.integers(0, vocab_size, size=n)
        plan.corruption = choice
        out[plan.positions[choice == MASKED]] = mask_token_id
        out[plan.positions[choice == RANDOM]] = random_ids[choice == RANDOM]
    else:
        raise ConfigError(f"unknown corruption policy {policy!r}")
    return TokenSequence(seq.utt_id, seq.modality, out, None)


def mask_for(seq: TokenSequence, config: MaskConfig, seed: int, step: int,
             mask_token_id: int, vocab_size: int) -> tuple[TokenSequence, MaskPlan]:
    """Sample and apply a mask with draws keyed on (seed, step, utterance)."""
    plan_seed = int(stream(seed, "mask", step, seq.utt_id).integers(2**63))
    plan = sample_mask(len(seq), config, plan_seed)
    corrupt_seed = int(stream(seed, "corrupt", step, seq.utt_id).integers(2**63))
    corrupted = apply_mask(seq, plan, mask_token_id, vocab_size, corrupt_seed, config.policy)
    return corrupted, plan
