"""Readers and writers for every on-disk artifact, plus a log-mel front end.

File formats (all little-endian):

* feature file: ``b"TV2F"``, u32 version=1, u32 num_frames, u32 feat_dim,
  then ``num_frames * feat_dim`` float32 values, row-major.
* manifest: JSON lines ``{"id", "path", "frames"}``.
* lexicon: ``WORD PH1 PH2 ...`` per line, ``;`` starts a comment line.
* duration stats: ``PHONEME<TAB>count:prob,count:prob,...`` with one
  ``DEFAULT`` row holding the fallback distribution.
* token corpus: ``id<TAB>speech|text<TAB>space separated ids``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, ParseError
from .sequence import MODALITIES, TokenSequence

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"TV2F"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class FeatureMatrix:
    utt_id: str
    frames: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.frames.shape[1])


# ---------------------------------------------------------------------------
# binary matrix containers
# ---------------------------------------------------------------------------


def write_matrix_file(path, magic: bytes, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, rows, cols))
        fh.write(matrix.tobytes())


def read_matrix_file(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte offset {len(raw)}")
    got, version, rows, cols = _HEADER.unpack_from(raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r} at byte offset 0, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    expected = rows * cols * 4
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(raw)}, "
            f"header declares {rows}x{cols} ({expected} bytes from offset {_HEADER.size})")
    if payload > expected:
        raise FormatError(
            f"{path}: {payload - expected} trailing bytes at byte offset {_HEADER.size + expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).copy()


def read_matrix_header(path, magic: bytes) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte offset {len(head)}")
    got, version, rows, cols = _HEADER.unpack(head)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r} at byte offset 0, expected {magic!r}")
    return rows, cols


def write_feature_file(path, features: FeatureMatrix | np.ndarray) -> None:
    frames = features.frames if isinstance(features, FeatureMatrix) else features
    write_matrix_file(path, FEATURE_MAGIC, frames)


def read_feature_file(path, utt_id: str | None = None) -> FeatureMatrix:
    frames = read_matrix_file(path, FEATURE_MAGIC)
    if not np.isfinite(frames).all():
        raise FormatError(f"{path}: non-finite feature values")
    return FeatureMatrix(utt_id or Path(path).stem, frames)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    frames: int


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e.utt_id, "path": e.path, "frames": e.frames}) + "\n")


def read_manifest(path, check_files: bool = False) -> list[ManifestEntry]:
    """Load a JSON-lines manifest; relative paths resolve against its directory."""
    base = Path(path).parent
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(str(rec["id"]), str(rec["path"]), int(rec["frames"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad manifest record ({exc})", lineno) from exc
            if entry.utt_id in seen:
                raise ParseError(f"duplicate utterance id {entry.utt_id!r}", lineno)
            seen.add(entry.utt_id)
            if not Path(entry.path).is_absolute():
                entry.path = str(base / entry.path)
            if check_files:
                rows, _ = read_matrix_header(entry.path, FEATURE_MAGIC)
                if rows != entry.frames:
                    raise FormatError(
                        f"{entry.path}: header has {rows} frames, manifest says {entry.frames}")
            entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV as float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: only 16-bit PCM is supported")
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            rate = w.getframerate()
            pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: unreadable WAV ({exc})") from exc
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


@dataclass
class LogMelConfig:
    n_mels: int = 80
    frame_ms: float = 25.0
    hop_ms: float = 20.0
    sample_rate: int = SAMPLE_RATE

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000))

    @property
    def hop_len(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.frame_len - 1).bit_length()


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style filters, shape [n_mels, n_fft // 2 + 1]."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames_for(num_samples: int, frame_len: int, hop_len: int) -> int:
    if num_samples < frame_len:
        return 0
    return 1 + (num_samples - frame_len) // hop_len


def logmel_extract(samples: np.ndarray, config: LogMelConfig | None = None,
                   sample_rate: int = SAMPLE_RATE, utt_id: str = "") -> FeatureMatrix:
    config = config or LogMelConfig()
    if sample_rate != SAMPLE_RATE or config.sample_rate != SAMPLE_RATE:
        raise ConfigError(f"log-mel expects {SAMPLE_RATE} Hz audio, got {sample_rate}")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    flen, hop = config.frame_len, config.hop_len
    n = num_frames_for(samples.size, flen, hop)
    if n == 0:
        warnings.warn(f"{utt_id or 'audio'}: {samples.size} samples is shorter than one frame",
                      stacklevel=2)
        return FeatureMatrix(utt_id, np.zeros((0, config.n_mels), dtype=np.float32))
    starts = np.arange(n) * hop
    frames = samples[starts[:, None] + np.arange(flen)[None, :]]
    frames = frames * np.hanning(flen + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(config.n_mels, config.n_fft, SAMPLE_RATE).T
    return FeatureMatrix(utt_id, np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


# ---------------------------------------------------------------------------
# lexicon
# ---------------------------------------------------------------------------


@dataclass
class Lexicon:
    entries: dict[str, list[str]] = field(default_factory=dict)
    duplicates: int = 0

    @property
    def inventory(self) -> set[str]:
        return {p for phones in self.entries.values() for p in phones}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word.upper() in self.entries

    def get(self, word: str) -> list[str] | None:
        return self.entries.get(word.upper())


def parse_lexicon_lines(lines: Iterable[str]) -> Lexicon:
    lex = Lexicon()
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith(";"):
            continue
        parts = stripped.split()
        word, phones = parts[0].upper(), parts[1:]
        if not phones:
            raise ParseError(f"word {word!r} has no phonemes", lineno)
        if word in lex.entries:
            lex.duplicates += 1
            continue
        lex.entries[word] = phones
    if lex.duplicates:
        log.warning("lexicon: ignored %d duplicate entries", lex.duplicates)
    return lex


def parse_lexicon(path) -> Lexicon:
    with open(path, encoding="utf-8") as fh:
        return parse_lexicon_lines(fh)


def write_lexicon(path, lexicon: Lexicon) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, phones in lexicon.entries.items():
            fh.write(f"{word} {' '.join(phones)}\n")


# ---------------------------------------------------------------------------
# duration statistics
# ---------------------------------------------------------------------------

DEFAULT_ROW = "DEFAULT"


@dataclass
class DurationStats:
    """Repeat-count distributions per positional phoneme, plus a fallback."""

    default: dict[int, float]
    per_phoneme: dict[str, dict[int, float]] = field(default_factory=dict)

    def distribution(self, phoneme: str | None = None) -> dict[int, float]:
        if phoneme is not None and phoneme in self.per_phoneme:
            return self.per_phoneme[phoneme]
        return self.default

    def mean(self, phoneme: str | None = None) -> float:
        return float(sum(c * p for c, p in self.distribution(phoneme).items()))


def _normalize(dist: dict[int, float], where: str) -> dict[int, float]:
    total = math.fsum(dist.values())
    if total <= 0:
        raise FormatError(f"{where}: probabilities sum to zero")
    if abs(total - 1.0) > 1e-9:
        warnings.warn(f"{where}: probabilities sum to {total}, renormalising", stacklevel=3)
        return {c: p / total for c, p in dist.items()}
    return dict(dist)


def _parse_dist(text: str, lineno: int) -> dict[int, float]:
    dist: dict[int, float] = {}
    for item in text.split(","):
        try:
            c, p = item.split(":")
            count, prob = int(c), float(p)
        except ValueError as exc:
            raise ParseError(f"bad count:prob item {item!r}", lineno) from exc
        if count < 1:
            raise ParseError(f"repeat count must be >= 1, got {count}", lineno)
        if prob < 0 or not math.isfinite(prob):
            raise ParseError(f"probability must be non-negative, got {prob}", lineno)
        dist[count] = dist.get(count, 0.0) + prob
    return _normalize(dist, f"line {lineno}")


def read_duration_stats(path) -> DurationStats:
    default, per = None, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                name, body = line.split("\t")
            except ValueError as exc:
                raise ParseError("expected PHONEME<TAB>distribution", lineno) from exc
            dist = _parse_dist(body, lineno)
            if name == DEFAULT_ROW:
                default = dist
            else:
                per[name] = dist
    if default is None:
        raise FormatError(f"{path}: missing {DEFAULT_ROW} row")
    return DurationStats(default, per)


def _format_dist(dist: dict[int, float]) -> str:
    return ",".join(f"{c}:{dist[c]!r}" for c in sorted(dist))


def write_duration_stats(path, stats: DurationStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DEFAULT_ROW}\t{_format_dist(stats.default)}\n")
        for name in sorted(stats.per_phoneme):
            fh.write(f"{name}\t{_format_dist(stats.per_phoneme[name])}\n")


# ---------------------------------------------------------------------------
# token corpora
# ---------------------------------------------------------------------------


def format_token_line(seq: TokenSequence) -> str:
    return f"{seq.utt_id}\t{seq.modality}\t{' '.join(map(str, seq.ids.tolist()))}\n"


def write_token_corpus(path, corpus: Iterable[TokenSequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in corpus:
            fh.write(format_token_line(seq))


def read_token_corpus(path, vocab_size: int | None = None) -> list[TokenSequence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError("expected id<TAB>modality<TAB>ids", lineno)
            utt, modality, body = fields
            if modality not in MODALITIES:
                raise ParseError(f"unknown modality tag {modality!r}", lineno)
            try:
                ids = [int(tok) for tok in body.split()]
            except ValueError as exc:
                raise ParseError(f"non-integer token in {body!r}", lineno) from exc
            try:
                out.append(TokenSequence(utt, modality, np.asarray(ids, dtype=np.int64), vocab_size))
            except IndexError as exc:
                raise ParseError(str(exc), lineno) from exc
    return out
