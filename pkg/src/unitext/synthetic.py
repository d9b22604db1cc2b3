"""Synthetic unpaired speech/text corpora with a known phoneme-to-unit map.

Words are random phoneme strings; sentences follow a sparse random bigram
chain over words. Speech utterances realise each positional phoneme as a run
of one fixed unit id with a random duration, text utterances are plain word
sequences. Both sides are sampled independently from the same language, so
they are unpaired but share structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus_io import Lexicon
from .rng import stream
from .sequence import SPEECH, TokenSequence
from .text import PhonemeVocab, build_phoneme_vocab, position_tags


@dataclass
class SyntheticConfig:
    n_phones: int = 16
    n_words: int = 60
    word_len: tuple[int, int] = (1, 5)
    sentence_len: tuple[int, int] = (3, 8)
    successors: int = 4
    n_speech: int = 200
    n_text: int = 200
    run_mean: float = 3.0
    unit_noise: float = 0.0
    speech_vocab: int | None = None
    seed: int = 0


@dataclass
class SyntheticCorpus:
    lexicon: Lexicon
    vocab: PhonemeVocab
    phone_to_unit: np.ndarray
    speech: list[TokenSequence]
    sentences: list[tuple[str, list[str]]]
    speech_vocab: int


def _words(cfg: SyntheticConfig, rng: np.random.Generator) -> Lexicon:
    phones = [f"P{i:02d}" for i in range(cfg.n_phones)]
    lex = Lexicon()
    lo, hi = cfg.word_len
    while len(lex.entries) < cfg.n_words:
        n = int(rng.integers(lo, hi + 1))
        pron = [phones[j] for j in rng.integers(0, cfg.n_phones, size=n)]
        word = "W" + "".join(p[1:] for p in pron)
        lex.entries.setdefault(word, pron)
    return lex


def _sentence(words: list[str], successors: np.ndarray, cfg: SyntheticConfig,
              rng: np.random.Generator) -> list[str]:
    lo, hi = cfg.sentence_len
    n = int(rng.integers(lo, hi + 1))
    cur = int(rng.integers(len(words)))
    out = [words[cur]]
    for _ in range(n - 1):
        cur = int(successors[cur, rng.integers(successors.shape[1])])
        out.append(words[cur])
    return out


def make_synthetic(cfg: SyntheticConfig | None = None) -> SyntheticCorpus:
    cfg = cfg or SyntheticConfig()
    rng = stream(cfg.seed, "synthetic", "language")
    lex = _words(cfg, rng)
    vocab = build_phoneme_vocab(lex)
    words = list(lex.entries)
    successors = rng.integers(0, len(words), size=(len(words), cfg.successors))
    k = cfg.speech_vocab or len(vocab)
    if k < len(vocab):
        raise ValueError(f"speech vocab {k} smaller than the phoneme inventory {len(vocab)}")
    phone_to_unit = rng.permutation(k)[:len(vocab)]

    speech = []
    for i in range(cfg.n_speech):
        r = stream(cfg.seed, "synthetic", "speech", i)
        tagged = [t for w in _sentence(words, successors, cfg, r) for t in position_tags(lex.entries[w])]
        units = phone_to_unit[[vocab[t] for t in tagged]]
        runs = r.geometric(1.0 / cfg.run_mean, size=units.size)
        ids = np.repeat(units, runs)
        if cfg.unit_noise:
            flip = r.random(ids.size) < cfg.unit_noise
            ids[flip] = r.integers(0, k, size=int(flip.sum()))
        speech.append(TokenSequence(f"s{i:05d}", SPEECH, ids, k))
    sentences = []
    for i in range(cfg.n_text):
        r = stream(cfg.seed, "synthetic", "text", i)
        sentences.append((f"t{i:05d}", _sentence(words, successors, cfg, r)))
    return SyntheticCorpus(lex, vocab, phone_to_unit, speech, sentences, k)
