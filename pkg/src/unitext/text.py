"""Text tokenizer: words to positional phonemes, and stochastic up-sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus_io import DurationStats, Lexicon
from .errors import ConfigError, ContractError, ParseError
from .rng import stream
from .sequence import SPEECH, TEXT, TokenSequence
from .speech import run_lengths

log = logging.getLogger(__name__)

BEGIN, INSIDE, END, SINGLE = "_B", "_I", "_E", "_S"


def position_tags(phones: Sequence[str]) -> list[str]:
    if len(phones) == 1:
        return [phones[0] + SINGLE]
    return ([phones[0] + BEGIN] + [p + INSIDE for p in phones[1:-1]] + [phones[-1] + END])


@dataclass
class PhonemeVocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("phoneme vocabulary has duplicate entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def read(cls, path) -> "PhonemeVocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    tok, idx = line.rstrip("\n").split("\t")
                    pairs.append((int(idx), tok))
                except ValueError as exc:
                    raise ParseError("expected PHONEME_TAG<TAB>id", lineno) from exc
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ParseError("phoneme ids must be contiguous from 0")
        return cls([t for _, t in pairs])


def build_phoneme_vocab(lexicon: Lexicon) -> PhonemeVocab:
    if not lexicon.entries:
        raise ConfigError("cannot build a phoneme vocabulary from an empty lexicon")
    tagged = {t for phones in lexicon.entries.values() for t in position_tags(phones)}
    return PhonemeVocab(sorted(tagged))


@dataclass
class OOVCounter:
    words: int = 0
    examples: dict[str, int] = field(default_factory=dict)

    def add(self, word: str) -> None:
        self.words += 1
        self.examples[word] = self.examples.get(word, 0) + 1


def words_to_phonemes(words: Iterable[str], lexicon: Lexicon, vocab: PhonemeVocab,
                      utt_id: str = "", oov: OOVCounter | None = None) -> TokenSequence:
    ids: list[int] = []
    for word in words:
        phones = lexicon.get(word)
        if phones is None:
            if oov is not None:
                oov.add(word.upper())
            continue
        ids.extend(vocab[t] for t in position_tags(phones))
    return TokenSequence(utt_id, TEXT, np.asarray(ids, dtype=np.int64), len(vocab))


@dataclass
class UpsampleConfig:
    """``mode`` is ``"repeat"`` or ``"original"``; without ``stats`` repeats are geometric."""

    mode: str = "repeat"
    stats: DurationStats | None = None
    geometric_mean: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("repeat", "original"):
            raise ConfigError(f"unknown up-sampling mode {self.mode!r}")
        if self.geometric_mean < 1:
            raise ConfigError("geometric mean repeat must be >= 1")


def _draw_repeats(ids: np.ndarray, config: UpsampleConfig, vocab: PhonemeVocab | None,
                  rng: np.random.Generator) -> np.ndarray:
    if config.stats is None:
        return rng.geometric(1.0 / config.geometric_mean, size=ids.size)
    stats = config.stats
    if vocab is None or not stats.per_phoneme:
        dist = stats.default
        counts = np.fromiter(dist.keys(), dtype=np.int64)
        probs = np.fromiter(dist.values(), dtype=np.float64)
        return counts[rng.choice(len(counts), size=ids.size, p=probs / probs.sum())]
    reps = np.empty(ids.size, dtype=np.int64)
    u = rng.random(ids.size)
    for i, tok in enumerate(ids):
        dist = stats.distribution(vocab.tokens[tok])
        counts = np.fromiter(dist.keys(), dtype=np.int64)
        cdf = np.cumsum(np.fromiter(dist.values(), dtype=np.float64))
        reps[i] = counts[min(int(np.searchsorted(cdf, u[i] * cdf[-1], side="right")), len(counts) - 1)]
    return reps


def upsample(seq: TokenSequence, config: UpsampleConfig, vocab: PhonemeVocab | None = None,
             epoch: int = 0) -> TokenSequence:
    """Repeat each text token a random number of times (``mode="repeat"``).

    Draws come from a stream keyed by (seed, utterance id, epoch), so a
    sentence gets the same repeats regardless of processing order.
    """
    if seq.modality != TEXT:
        raise ContractError("up-sampling applies to text tokens only")
    if config.mode == "original" or len(seq) == 0:
        return seq.replace(seq.ids.copy())
    rng = stream(config.seed, "upsample", seq.utt_id, epoch)
    reps = _draw_repeats(seq.ids, config, vocab, rng)
    return seq.replace(np.repeat(seq.ids, reps))


def _histogram(counts: Iterable[int]) -> dict[int, float]:
    values, freq = np.unique(np.fromiter(counts, dtype=np.int64), return_counts=True)
    total = freq.sum()
    return {int(v): float(f) / float(total) for v, f in zip(values, freq)}


def estimate_duration_stats(speech: Sequence[TokenSequence] | None = None,
                            alignments: Iterable[tuple[str, int]] | None = None) -> DurationStats:
    """Estimate repeat-count distributions.

    Unsupervised mode (``speech``): the run-length histogram of speech tokens,
    used as the single DEFAULT distribution. External mode (``alignments``):
    ``(positional phoneme, frame count)`` pairs give per-phoneme histograms,
    and their pooled histogram becomes DEFAULT.
    """
    if (speech is None) == (alignments is None):
        raise ConfigError("pass exactly one of a speech corpus or aligned durations")
    if speech is not None:
        runs = []
        for seq in speech:
            if seq.modality != SPEECH:
                raise ContractError(f"{seq.utt_id}: expected speech tokens")
            runs.append(run_lengths(seq.ids)[1])
        pooled = np.concatenate(runs) if runs else np.zeros(0, np.int64)
        if pooled.size == 0:
            raise ConfigError("no speech tokens to estimate durations from")
        return DurationStats(_histogram(pooled))
    by_phone: dict[str, list[int]] = {}
    for phone, count in alignments:
        if count < 1:
            raise ConfigError(f"aligned duration for {phone} must be >= 1, got {count}")
        by_phone.setdefault(phone, []).append(int(count))
    if not by_phone:
        raise ConfigError("no aligned durations supplied")
    per = {p: _histogram(c) for p, c in by_phone.items()}
    pooled = [c for cs in by_phone.values() for c in cs]
    return DurationStats(_histogram(pooled), per)
