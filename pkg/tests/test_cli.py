import json
from pathlib import Path

import numpy as np
import pytest

from unitext import corpus_io as cio
from unitext.cli import main
from unitext.config import RunConfig, preset
from unitext.errors import ConfigError
from unitext.sequence import SPEECH, TEXT

TINY = ["--set", "model.d_model=16", "--set", "model.d_ff=32", "--set", "model.n_layers=1",
        "--set", "model.n_heads=2", "--set", "train.warmup_steps=3",
        "--set", "train.checkpoint_interval=10", "--set", "train.tokens_per_batch=512"]


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def wav_dir(tmp_path):
    d = tmp_path / "wavs"
    d.mkdir()
    rng = np.random.default_rng(0)
    t = np.arange(16000) / 16000
    for i, f in enumerate((220, 440, 880)):
        cio.write_wav(d / f"utt{i}.wav", 0.3 * np.sin(2 * np.pi * f * t) + 0.01 * rng.normal(size=t.size))
    return d


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(d), "--n-speech", "40", "--n-text", "40"]) == 0
    assert main(["estimate-durations", "--speech-corpus", str(d / "speech.tsv"), "--out", str(d / "dur.tsv")]) == 0
    assert main(["tokenize-text", "--text", str(d / "text.txt"), "--lexicon", str(d / "lexicon.txt"),
                 "--vocab", str(d / "phonemes.tsv"), "--upsample", "original", "--out", str(d / "text.tsv")]) == 0
    return d


def pretrain_args(synth, out, *extra):
    return ["pretrain", "--speech-corpus", str(synth / "speech.tsv"), "--text-corpus", str(synth / "text.tsv"),
            "--phoneme-vocab", str(synth / "phonemes.tsv"), "--out-dir", str(out), *TINY, *extra]


class TestFeatures:
    def test_three_wavs(self, wav_dir, tmp_path):
        out = tmp_path / "feats"
        assert main(["extract-features", "--wav-dir", str(wav_dir), "--out-dir", str(out)]) == 0
        entries = cio.read_manifest(out / "manifest.jsonl", check_files=True)
        assert [e.utt_id for e in entries] == ["utt0", "utt1", "utt2"]
        assert all(e.frames == 49 for e in entries)
        assert (out / "run_config.txt").exists()

    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["extract-features", "--wav-dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o")]) == 2
        assert "no input files" in capsys.readouterr().err

    def test_bad_file_listed(self, wav_dir, tmp_path, capsys):
        (wav_dir / "broken.wav").write_bytes(b"RIFF0000")
        assert main(["extract-features", "--wav-dir", str(wav_dir), "--out-dir", str(tmp_path / "o")]) == 2
        assert "broken.wav" in capsys.readouterr().err
        assert len(cio.read_manifest(tmp_path / "o" / "manifest.jsonl")) == 3

    def test_rerun_byte_identical(self, wav_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["extract-features", "--wav-dir", str(wav_dir), "--out-dir", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


class TestSpeechCommands:
    @pytest.fixture
    def feats(self, wav_dir, tmp_path):
        out = tmp_path / "feats"
        main(["extract-features", "--wav-dir", str(wav_dir), "--out-dir", str(out), "--n-mels", "20"])
        return out

    def test_k_too_large(self, feats, tmp_path, capsys):
        code = main(["train-codebook", "--manifest", str(feats / "manifest.jsonl"), "--k", "500",
                     "--out", str(tmp_path / "c.tv2c")])
        assert code == 2 and "147" in capsys.readouterr().err

    def test_default_k_is_500(self):
        assert RunConfig().codebook.k == 500

    def test_codebook_deterministic(self, feats, tmp_path):
        for name in ("a", "b"):
            assert main(["train-codebook", "--manifest", str(feats / "manifest.jsonl"), "--k", "8",
                         "--seed", "3", "--out", str(tmp_path / f"{name}.tv2c")]) == 0
        assert (tmp_path / "a.tv2c").read_bytes() == (tmp_path / "b.tv2c").read_bytes()

    def test_tokenize_and_reduce_idempotent(self, feats, tmp_path):
        main(["train-codebook", "--manifest", str(feats / "manifest.jsonl"), "--k", "8", "--out", str(tmp_path / "c.tv2c")])
        assert main(["tokenize-speech", "--manifest", str(feats / "manifest.jsonl"), "--codebook",
                     str(tmp_path / "c.tv2c"), "--out", str(tmp_path / "s.tsv")]) == 0
        corpus = cio.read_token_corpus(tmp_path / "s.tsv", vocab_size=8)
        assert [len(s) for s in corpus] == [49, 49, 49]
        main(["tokenize-speech", "--tokens", str(tmp_path / "s.tsv"), "--reduce", "--out", str(tmp_path / "r1.tsv")])
        main(["tokenize-speech", "--tokens", str(tmp_path / "r1.tsv"), "--reduce", "--out", str(tmp_path / "r2.tsv")])
        assert (tmp_path / "r1.tsv").read_bytes() == (tmp_path / "r2.tsv").read_bytes()

    def test_needs_a_source(self, tmp_path):
        assert main(["tokenize-speech", "--out", str(tmp_path / "s.tsv")]) == 2


class TestTextCommands:
    def test_original_lengths_are_phoneme_counts(self, synth):
        lex = cio.parse_lexicon(synth / "lexicon.txt")
        corpus = cio.read_token_corpus(synth / "text.tsv")
        sentences = [line.split("\t")[1].split() for line in (synth / "text.txt").read_text().splitlines()]
        assert [len(s) for s in corpus] == [sum(len(lex.get(w)) for w in words) for words in sentences]
        assert all(s.modality == TEXT for s in corpus)

    def test_repeat_mean_ratio_matches_stats(self, tmp_path):
        assert main(["synth", "--out-dir", str(tmp_path), "--n-speech", "1", "--n-text", "1000"]) == 0
        stats = cio.DurationStats({1: 0.25, 3: 0.25, 6: 0.5})
        cio.write_duration_stats(tmp_path / "d.tsv", stats)
        common = ["tokenize-text", "--text", str(tmp_path / "text.txt"), "--lexicon", str(tmp_path / "lexicon.txt"),
                  "--vocab", str(tmp_path / "phonemes.tsv")]
        assert main(common + ["--upsample", "original", "--out", str(tmp_path / "o.tsv")]) == 0
        assert main(common + ["--upsample", "repeat", "--stats", str(tmp_path / "d.tsv"),
                              "--out", str(tmp_path / "r.tsv")]) == 0
        orig = cio.read_token_corpus(tmp_path / "o.tsv")
        rep = cio.read_token_corpus(tmp_path / "r.tsv")
        ratio = np.mean([len(r) / len(o) for r, o in zip(rep, orig)])
        assert abs(ratio - stats.mean()) / stats.mean() < 0.05

    def test_vocab_written(self, synth, tmp_path):
        assert main(["tokenize-text", "--text", str(synth / "text.txt"), "--lexicon", str(synth / "lexicon.txt"),
                     "--upsample", "original", "--vocab-out", str(tmp_path / "v.tsv"),
                     "--out", str(tmp_path / "t.tsv")]) == 0
        assert (tmp_path / "v.tsv").read_text() == (synth / "phonemes.tsv").read_text()

    def test_estimate_durations_needs_one_source(self, tmp_path):
        assert main(["estimate-durations", "--out", str(tmp_path / "d.tsv")]) == 2


class TestPretrainAndAnalyze:
    def test_speech_only(self, synth, tmp_path):
        assert main(pretrain_args(synth, tmp_path / "run", "--steps", "6", "--text-ratio", "0")) == 0
        records = [json.loads(x) for x in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 6 and {r["modality"] for r in records} == {SPEECH}

    def test_smoke_loss_decreases(self, synth, tmp_path):
        assert main(pretrain_args(synth, tmp_path / "run", "--steps", "60",
                                  "--set", "train.peak_lr=3e-3")) == 0
        losses = [json.loads(x)["loss"] for x in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_resume_bit_identical(self, synth, tmp_path):
        up = ["--upsample", "repeat", "--stats", str(synth / "dur.tsv")]
        assert main(pretrain_args(synth, tmp_path / "full", "--steps", "24", *up)) == 0
        assert main(pretrain_args(synth, tmp_path / "part", "--steps", "24", "--stop-at", "13", *up)) == 0
        assert main(pretrain_args(synth, tmp_path / "part", "--steps", "24", "--resume", *up)) == 0
        full, part = tree_bytes(tmp_path / "full"), tree_bytes(tmp_path / "part")
        assert full["metrics.jsonl"] == part["metrics.jsonl"]
        for name, blob in full.items():
            if name.startswith("checkpoints/") and "00000013" not in name:
                assert part[name] == blob, name

    def test_resume_without_checkpoint(self, synth, tmp_path):
        assert main(pretrain_args(synth, tmp_path / "none", "--steps", "4", "--resume")) == 2

    def test_rerun_from_saved_config(self, synth, tmp_path):
        assert main(pretrain_args(synth, tmp_path / "a", "--steps", "5", "--seed", "7")) == 0
        again = ["pretrain", "--config", str(tmp_path / "a" / "run_config.txt"),
                 "--speech-corpus", str(synth / "speech.tsv"), "--text-corpus", str(synth / "text.tsv"),
                 "--out-dir", str(tmp_path / "b")]
        assert main(again) == 0
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_analyze(self, synth, tmp_path):
        main(pretrain_args(synth, tmp_path / "run", "--steps", "4"))
        ckpt = tmp_path / "run" / "checkpoints" / "step_00000004.tv2m"
        assert main(["analyze", "--checkpoints", str(ckpt), "--out-dir", str(tmp_path / "an"), "--csv"]) == 0
        reports = sorted((tmp_path / "an").glob("*.report.json"))
        assert len(reports) == 1
        data = json.loads(reports[0].read_text())
        assert data["step"] == 4 and data["k"] == 10 and 0 <= data["mixing_rate"] <= 1
        first = (tmp_path / "an" / "step_00000004.points.csv").read_bytes()
        main(["analyze", "--checkpoints", str(ckpt), "--out-dir", str(tmp_path / "an"), "--csv"])
        assert (tmp_path / "an" / "step_00000004.points.csv").read_bytes() == first

    def test_analyze_missing_checkpoint(self, tmp_path):
        assert main(["analyze", "--checkpoints", str(tmp_path / "nope.tv2m"), "--out-dir", str(tmp_path)]) == 2

    def test_empty_text_corpus_with_text_steps(self, synth, tmp_path):
        (tmp_path / "empty.tsv").write_text("")
        args = ["pretrain", "--speech-corpus", str(synth / "speech.tsv"), "--text-corpus",
                str(tmp_path / "empty.tsv"), "--out-dir", str(tmp_path / "r"), "--steps", "4", *TINY]
        assert main(args) == 2


class TestConfig:
    def test_layering(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\ntrain.peak_lr=1e-3\nmodel.d_model=32\n")
        cfg = preset("desk").load(tmp_path / "c.txt").apply(["model.d_model=48", "seed=4"]).resolve()
        assert cfg.train.peak_lr == 1e-3 and cfg.model.d_model == 48 and cfg.train.seed == 4

    def test_dump_round_trip(self, tmp_path):
        cfg = preset("ablation").apply(["mask.policy=80-10-10", "model.final_ln=false"])
        cfg.write(tmp_path / "c.txt", "header line")
        back = RunConfig().load(tmp_path / "c.txt")
        assert back.dump() == cfg.dump()

    @pytest.mark.parametrize("item", ["nope.x=1", "train.peak_lr=abc", "model.d_model", "model.n_heads=5",
                                      "model.final_ln=maybe"])
    def test_bad_settings(self, item):
        with pytest.raises(ConfigError):
            RunConfig().apply([item])

    def test_bad_set_exit_code(self, synth, tmp_path):
        assert main(pretrain_args(synth, tmp_path / "r", "--set", "train.nope=1")) == 2

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("huge")
