"""Command-line front end.

Exit codes: 0 success, 1 internal or numeric failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import corpus_io as cio
from .analysis import overlap_report
from .config import RunConfig, preset
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .model import JointModel, load_checkpoint
from .sequence import SPEECH, TEXT, TokenSequence
from .speech import (kmeans_assign, kmeans_train, pool_frames, read_codebook, run_length_reduce,
                     write_codebook)
from .synthetic import SyntheticConfig, make_synthetic
from .text import (OOVCounter, PhonemeVocab, UpsampleConfig, build_phoneme_vocab,
                   estimate_duration_stats, upsample, words_to_phonemes)
from .trainer import Trainer, latest_checkpoint

log = logging.getLogger("unitext")

RUN_CONFIG = "run_config.txt"


class UsageError(Exception):
    """Bad command-line input; reported with exit code 2."""


def _run_config(args) -> RunConfig:
    cfg = preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    if getattr(args, "config", None):
        cfg.load(args.config)
    cfg.apply(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.resolve()


def _config_beside(path: Path) -> Path:
    return path.with_name(path.name + "." + RUN_CONFIG)


def _command_line() -> str:
    return "command: " + " ".join(shlex.quote(a) for a in ["unitext"] + sys.argv[1:])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_extract_features(args) -> int:
    cfg = _run_config(args)
    for attr in ("n_mels", "frame_ms", "hop_ms"):
        if getattr(args, attr) is not None:
            cfg.set(f"features.{attr}", str(getattr(args, attr)))
    wavs = sorted(Path(args.wav_dir).glob("*.wav")) if Path(args.wav_dir).is_dir() else []
    if not wavs:
        raise UsageError("no input files")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, failures = [], []
    for wav in wavs:
        try:
            samples, rate = cio.read_wav(wav)
            feats = cio.logmel_extract(samples, cfg.features, rate, wav.stem)
            dest = out / f"{wav.stem}.tv2f"
            cio.write_feature_file(dest, feats)
            entries.append(cio.ManifestEntry(wav.stem, dest.name, feats.num_frames))
        except (FormatError, ConfigError, OSError, EOFError) as exc:
            failures.append(f"{wav.name}: {exc}")
    cio.write_manifest(out / "manifest.jsonl", entries)
    cfg.write(out / RUN_CONFIG, _command_line())
    if failures:
        for line in failures:
            print(line, file=sys.stderr)
        return 2
    return 0


def cmd_train_codebook(args) -> int:
    cfg = _run_config(args)
    if args.k is not None:
        cfg.set("codebook.k", str(args.k))
    if args.stride is not None:
        cfg.set("codebook.stride", str(args.stride))
    entries = cio.read_manifest(args.manifest, check_files=True)
    feats = [cio.read_feature_file(e.path, e.utt_id) for e in entries]
    frames = pool_frames(feats, cfg.codebook.stride)
    if frames.shape[0] < cfg.codebook.k:
        raise UsageError(f"k={cfg.codebook.k} is larger than the {frames.shape[0]} available frames")
    book = kmeans_train(frames, cfg.kmeans())
    log.info("k-means: %d iterations, inertia %.6g", book.iterations, book.inertia)
    out = Path(args.out)
    write_codebook(out, book)
    cfg.write(_config_beside(out), _command_line())
    return 0


def cmd_tokenize_speech(args) -> int:
    cfg = _run_config(args)
    if args.tokens:
        corpus = cio.read_token_corpus(args.tokens)
        if any(s.modality != SPEECH for s in corpus):
            raise UsageError("--tokens must hold speech sequences")
    else:
        if not (args.manifest and args.codebook):
            raise UsageError("need --manifest and --codebook, or --tokens")
        book = read_codebook(args.codebook)
        corpus = [kmeans_assign(book, cio.read_feature_file(e.path, e.utt_id))
                  for e in cio.read_manifest(args.manifest, check_files=True)]
    if args.reduce:
        corpus = [run_length_reduce(s) for s in corpus]
    out = Path(args.out)
    cio.write_token_corpus(out, corpus)
    cfg.write(_config_beside(out), _command_line())
    return 0


def _read_sentences(path) -> list[tuple[str, list[str]]]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        if "\t" in line:
            utt, body = line.split("\t", 1)
        else:
            utt, body = f"line{i:07d}", line
        out.append((utt, body.split()))
    return out


def _duration_source(args, cfg: RunConfig) -> UpsampleConfig:
    if getattr(args, "stats", None):
        cfg.set("text.stats", str(Path(args.stats).resolve()))
    if getattr(args, "geometric_mean", None):
        cfg.set("text.geometric_mean", str(args.geometric_mean))
    stats = cio.read_duration_stats(cfg.text.stats) if cfg.text.stats else None
    return UpsampleConfig("repeat", stats, cfg.text.geometric_mean, cfg.upsample_seed())


def cmd_tokenize_text(args) -> int:
    cfg = _run_config(args)
    if args.upsample:
        cfg.set("text.upsample", args.upsample)
    lexicon = cio.parse_lexicon(args.lexicon)
    vocab = PhonemeVocab.read(args.vocab) if args.vocab else build_phoneme_vocab(lexicon)
    oov = OOVCounter()
    corpus = [words_to_phonemes(words, lexicon, vocab, utt, oov)
              for utt, words in _read_sentences(args.text)]
    if oov.words:
        log.warning("dropped %d out-of-vocabulary words", oov.words)
    if cfg.text.upsample == "repeat":
        up = _duration_source(args, cfg)
        corpus = [upsample(s, up, vocab) for s in corpus]
    elif cfg.text.upsample != "original":
        raise UsageError(f"unknown --upsample mode {cfg.text.upsample!r}")
    out = Path(args.out)
    cio.write_token_corpus(out, corpus)
    if args.vocab_out:
        vocab.write(args.vocab_out)
    cfg.write(_config_beside(out), _command_line())
    return 0


def cmd_estimate_durations(args) -> int:
    if bool(args.speech_corpus) == bool(args.alignments):
        raise UsageError("give exactly one of --speech-corpus or --alignments")
    if args.speech_corpus:
        stats = estimate_duration_stats(speech=cio.read_token_corpus(args.speech_corpus))
    else:
        pairs = []
        for line in Path(args.alignments).read_text(encoding="utf-8").splitlines():
            if line.strip():
                phone, count = line.split("\t")
                pairs.append((phone, int(count)))
        stats = estimate_duration_stats(alignments=pairs)
    cio.write_duration_stats(args.out, stats)
    return 0


def _vocab_size(corpus: list[TokenSequence], explicit: int | None) -> int:
    top = max((int(s.ids.max()) for s in corpus if len(s)), default=-1) + 1
    if explicit is not None:
        if top > explicit:
            raise UsageError(f"corpus holds id {top - 1} beyond vocab size {explicit}")
        return explicit
    return top


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    if args.text_ratio is not None:
        cfg.set("train.text_ratio", str(args.text_ratio))
    if args.speech_ratio is not None:
        cfg.set("train.speech_ratio", str(args.speech_ratio))
    if args.steps is not None:
        cfg.set("train.total_steps", str(args.steps))
    speech = cio.read_token_corpus(args.speech_corpus)
    text = cio.read_token_corpus(args.text_corpus) if args.text_corpus else []
    if cfg.train.speech_ratio and not speech:
        raise UsageError("speech corpus is empty")
    if cfg.train.text_ratio and not text:
        raise UsageError("text corpus is empty but the schedule includes text steps")
    vocab = PhonemeVocab.read(args.phoneme_vocab) if args.phoneme_vocab else None
    speech_k = read_codebook(args.codebook).k if args.codebook else args.speech_vocab
    cfg.set("model.speech_vocab", str(_vocab_size(speech, speech_k)))
    cfg.set("model.text_vocab", str(max(_vocab_size(text, len(vocab) if vocab else args.text_vocab), 1)))
    if args.upsample:
        cfg.set("text.epoch_resample", str(args.upsample == "repeat"))
    upsampling = None
    if cfg.text.epoch_resample:
        upsampling = (_duration_source(args, cfg), vocab)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = JointModel.initialize(cfg.model, cfg.seed)
    trainer = Trainer(model, speech, text, cfg.train, cfg.mask, out, upsampling)
    if args.resume:
        step = latest_checkpoint(out)
        if step is None:
            raise UsageError(f"--resume: no checkpoint under {out}")
        trainer.restore(step)
        log.info("resumed from step %d", step)
    cfg.write(out / RUN_CONFIG, _command_line())
    metrics = trainer.run(args.stop_at)
    if metrics:
        log.info("finished at step %d, last loss %.4f", trainer.step, metrics[-1]["loss"])
    return 0


def cmd_analyze(args) -> int:
    cfg = _run_config(args)
    k = args.k if args.k is not None else cfg.analysis.k
    method = args.method or cfg.analysis.method
    paths = [Path(p) for p in args.checkpoints]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise UsageError(f"missing checkpoint(s): {', '.join(missing)}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.set("analysis.k", str(k))
    cfg.set("analysis.method", method)
    cfg.write(out / RUN_CONFIG, _command_line())
    for path in paths:
        model, step = load_checkpoint(path)
        report = overlap_report(model, step, k, method, cfg.seed)
        report.write_json(out / f"{path.stem}.report.json")
        if args.csv:
            report.write_csv(out / f"{path.stem}.points.csv")
        print(json.dumps({"checkpoint": str(path), "step": step, "mixing_rate": report.mixing_rate}))
    return 0


def cmd_synth(args) -> int:
    syn = make_synthetic(SyntheticConfig(n_speech=args.n_speech, n_text=args.n_text, seed=args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cio.write_lexicon(out / "lexicon.txt", syn.lexicon)
    with open(out / "text.txt", "w", encoding="utf-8") as fh:
        for utt, words in syn.sentences:
            fh.write(f"{utt}\t{' '.join(words)}\n")
    cio.write_token_corpus(out / "speech.tsv", syn.speech)
    syn.vocab.write(out / "phonemes.tsv")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, presets: bool = False) -> None:
    p.add_argument("--config", help="flat section.key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if presets:
        p.add_argument("--preset", choices=("desk", "ablation", "base"), default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitext", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", help="WAV directory -> log-mel feature files + manifest")
    _common(p)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-mels", type=int)
    p.add_argument("--frame-ms", type=float)
    p.add_argument("--hop-ms", type=float)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-codebook", help="k-means codebook over manifest features")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, help="number of centroids (default 500)")
    p.add_argument("--stride", type=int, help="use every n-th frame for training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codebook)

    p = sub.add_parser("tokenize-speech", help="features or speech tokens -> speech token corpus")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--codebook")
    p.add_argument("--tokens", help="existing speech token corpus (e.g. to apply --reduce)")
    p.add_argument("--reduce", action="store_true", help="collapse runs of repeated tokens")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize_speech)

    p = sub.add_parser("tokenize-text", help="sentences -> positional phoneme token corpus")
    _common(p)
    p.add_argument("--text", required=True, help="one sentence per line, optionally id<TAB>sentence")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--vocab", help="existing phoneme vocabulary file")
    p.add_argument("--vocab-out", help="write the phoneme vocabulary here")
    p.add_argument("--upsample", choices=("repeat", "original"))
    p.add_argument("--stats", help="duration statistics file")
    p.add_argument("--geometric-mean", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize_text)

    p = sub.add_parser("estimate-durations", help="repeat-count statistics for up-sampling")
    p.add_argument("--speech-corpus")
    p.add_argument("--alignments", help="PHONEME<TAB>frames lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_durations)

    p = sub.add_parser("pretrain", help="joint masked-token pre-training")
    _common(p, presets=True)
    p.add_argument("--speech-corpus", required=True)
    p.add_argument("--text-corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--text-ratio", type=int, help="text steps per cycle (0 = speech only)")
    p.add_argument("--speech-ratio", type=int)
    p.add_argument("--steps", type=int, help="total steps (sets the schedule length)")
    p.add_argument("--stop-at", type=int, help="stop early at this step (schedule unchanged)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--codebook", help="take the speech vocabulary size from this codebook")
    p.add_argument("--speech-vocab", type=int)
    p.add_argument("--text-vocab", type=int)
    p.add_argument("--phoneme-vocab", help="phoneme vocabulary file (sets the text vocab size)")
    p.add_argument("--upsample", choices=("none", "repeat"),
                   help="redraw text repeats every epoch (text corpus must be un-upsampled)")
    p.add_argument("--stats")
    p.add_argument("--geometric-mean", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("analyze", help="embedding overlap reports for checkpoints")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--method", choices=("pca", "tsne"))
    p.add_argument("--csv", action="store_true", help="also write projection points as CSV")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write a synthetic unpaired corpus for smoke runs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-speech", type=int, default=200)
    p.add_argument("--n-text", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, ContractError, DimensionError,
            FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
