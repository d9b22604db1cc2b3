"""Joint pre-training loop: alternating speech/text batches with Adam.

All randomness is keyed on (seed, purpose, step or epoch, utterance id), so a
run resumed from any checkpoint replays the exact same batches and masks.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numeric as nm
from .container import read_container, write_container
from .errors import ConfigError, ContractError
from .masking import MaskConfig, mask_for
from .model import (JointModel, MaskedLoss, embed, encode, load_checkpoint, masked_loss, no_decay,
                    save_checkpoint)
from .rng import derive_seed, stream
from .sequence import SPEECH, TEXT, TokenSequence
from .text import PhonemeVocab, UpsampleConfig, upsample

log = logging.getLogger(__name__)

STATE_MAGIC = b"TV2S"


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup_steps: int = 32000
    total_steps: int = 400000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    tokens_per_batch: int = 16384
    speech_ratio: int = 1
    text_ratio: int = 1
    seed: int = 0
    checkpoint_interval: int = 1000
    grad_clip: float = 1.0
    freeze_repeats: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.peak_lr <= 0 or self.tokens_per_batch <= 0:
            raise ConfigError("learning rate and batch budget must be positive")
        if self.speech_ratio < 0 or self.text_ratio < 0 or self.speech_ratio + self.text_ratio == 0:
            raise ConfigError("modality ratio needs a positive entry")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if step < 0 or step > config.total_steps:
        raise ContractError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps if config.warmup_steps else config.peak_lr
    return config.peak_lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, nm.Tensor]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, nm.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, config: TrainConfig) -> bool:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Returns False and leaves everything untouched when a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            log.error("non-finite gradient for %s; skipping update", name)
            return False
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and not no_decay(name):
            p.data -= (lr * config.weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return True


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def crop(seq: TokenSequence, max_len: int | None, seed: int) -> TokenSequence:
    if max_len is None or len(seq) <= max_len:
        return seq
    start = int(stream(seed, "crop", seq.utt_id).integers(0, len(seq) - max_len + 1))
    return seq.replace(seq.ids[start:start + max_len])


def make_batches(corpus: Sequence[TokenSequence], tokens_per_batch: int, seed: int,
                 max_len: int | None = None) -> list[list[TokenSequence]]:
    """One epoch: seeded shuffle, crop to ``max_len``, greedy packing by token budget."""
    if not corpus:
        raise ConfigError("cannot batch an empty corpus")
    order = np.random.default_rng(seed).permutation(len(corpus))
    batches, current, used = [], [], 0
    for i in order:
        seq = crop(corpus[i], max_len, seed)
        n = len(seq)
        if n > tokens_per_batch:
            raise ConfigError(f"{seq.utt_id}: {n} tokens exceed the batch budget {tokens_per_batch}")
        if current and used + n > tokens_per_batch:
            batches.append(current)
            current, used = [], 0
        current.append(seq)
        used += n
    if current:
        batches.append(current)
    return batches


class BatchStream:
    """Endless epoch-by-epoch batches for one modality."""

    def __init__(self, corpus: Sequence[TokenSequence], modality: str, tokens_per_batch: int,
                 max_len: int, seed: int, upsampling: tuple[UpsampleConfig, PhonemeVocab | None] | None = None,
                 freeze_repeats: bool = False):
        if not corpus:
            raise ConfigError(f"empty {modality} corpus")
        self.corpus = list(corpus)
        self.modality = modality
        self.tokens_per_batch = tokens_per_batch
        self.max_len = max_len
        self.seed = seed
        self.upsampling = upsampling
        self.freeze = freeze_repeats
        self.consumed = 0
        self._epoch = -1
        self._batches: list = []
        self._pos = 0

    def _load_epoch(self, epoch: int) -> None:
        seqs = self.corpus
        if self.upsampling is not None:
            cfg, vocab = self.upsampling
            draw_epoch = 0 if self.freeze else epoch
            seqs = [upsample(s, cfg, vocab, epoch=draw_epoch) for s in seqs]
        self._batches = make_batches(seqs, self.tokens_per_batch,
                                     derive_seed(self.seed, "batches", self.modality, epoch), self.max_len)
        self._epoch = epoch
        self._pos = 0

    def next(self) -> list[TokenSequence]:
        if self._epoch < 0 or self._pos >= len(self._batches):
            self._load_epoch(self._epoch + 1)
        batch = self._batches[self._pos]
        self._pos += 1
        self.consumed += 1
        return batch

    def skip(self, n: int) -> None:
        for _ in range(n):
            self.next()


def modality_schedule(config: TrainConfig) -> list[str]:
    return [SPEECH] * config.speech_ratio + [TEXT] * config.text_ratio


def modality_at(step: int, config: TrainConfig) -> str:
    cycle = modality_schedule(config)
    return cycle[(step - 1) % len(cycle)]


@dataclass
class Group:
    ids: np.ndarray
    key_mask: np.ndarray
    flat_positions: np.ndarray
    targets: np.ndarray


@dataclass
class Batch:
    modality: str
    groups: list[Group]
    num_tokens: int

    @property
    def targets(self) -> np.ndarray:
        return np.concatenate([g.targets for g in self.groups]) if self.groups else np.zeros(0, np.int64)


def _pad_groups(lengths: Sequence[int], max_groups: int) -> list[list[int]]:
    """Split indices, sorted by length, into a few similar-length groups to limit padding."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    n = len(order)
    k = max(1, min(max_groups, n))
    bounds = [round(j * n / k) for j in range(k + 1)]
    return [order[bounds[j]:bounds[j + 1]] for j in range(k) if bounds[j + 1] > bounds[j]]


def prepare_batch(seqs: Sequence[TokenSequence], modality: str, model: JointModel,
                  mask_config: MaskConfig, seed: int, step: int, max_groups: int = 4) -> Batch:
    """Mask every sequence and pad into length-sorted groups.

    Grouping only changes how the batch is laid out for compute; the loss is
    still the mean over every masked position of the whole batch.
    """
    seqs = [s for s in seqs if len(s)]
    vocab = model.vocab_size(modality)
    masked = [mask_for(s, mask_config, seed, step, model.mask_id(modality), vocab) for s in seqs]
    groups = []
    for members in _pad_groups([len(s) for s in seqs], max_groups):
        width = max(len(seqs[i]) for i in members)
        ids = np.zeros((len(members), width), dtype=np.int64)
        key_mask = np.zeros((len(members), width), dtype=bool)
        flat, targets = [], []
        for row, i in enumerate(members):
            corrupted, plan = masked[i]
            ids[row, :len(corrupted)] = corrupted.ids
            key_mask[row, :len(corrupted)] = True
            flat.append(row * width + plan.positions)
            targets.append(plan.targets)
        groups.append(Group(ids, key_mask, np.concatenate(flat).astype(np.int64),
                            np.concatenate(targets).astype(np.int64)))
    return Batch(modality, groups, sum(len(s) for s in seqs))


def forward_loss(model: JointModel, batch: Batch) -> tuple[MaskedLoss, np.ndarray]:
    total = sum(g.targets.size for g in batch.groups)
    value, preds = None, []
    for g in batch.groups:
        if g.targets.size == 0:
            continue
        x = embed(g.ids, model, batch.modality)
        hidden = encode(x, model, g.key_mask).hidden
        part, pred = masked_loss(hidden, g.flat_positions, g.targets, model, batch.modality)
        weighted = part.value * (part.count / total)
        value = weighted if value is None else value + weighted
        preds.append(pred)
    if value is None:
        return MaskedLoss(nm.Tensor(np.zeros((), dtype=model.config.dtype)), 0), np.zeros(0, np.int64)
    return MaskedLoss(value, total), np.concatenate(preds)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_train_state(path, train_step: int, state: AdamState, consumed: dict[str, int],
                     seed: int) -> None:
    tensors = {}
    for name in state.m:
        tensors["m/" + name] = state.m[name]
        tensors["v/" + name] = state.v[name]
    meta = {"train_step": train_step, "adam_step": state.step, "consumed": consumed, "seed": seed}
    write_container(path, STATE_MAGIC, meta, tensors)


def load_train_state(path) -> tuple[int, AdamState, dict[str, int], int]:
    meta, tensors = read_container(path, STATE_MAGIC)
    m = {k[2:]: v.copy() for k, v in tensors.items() if k.startswith("m/")}
    v = {k[2:]: a.copy() for k, a in tensors.items() if k.startswith("v/")}
    return (int(meta["train_step"]), AdamState(int(meta["adam_step"]), m, v),
            dict(meta["consumed"]), int(meta["seed"]))


def checkpoint_paths(out_dir, step: int) -> tuple[Path, Path]:
    base = Path(out_dir) / "checkpoints" / f"step_{step:08d}"
    return base.with_suffix(".tv2m"), base.with_suffix(".tv2s")


def latest_checkpoint(out_dir) -> int | None:
    found = sorted(Path(out_dir, "checkpoints").glob("step_*.tv2s"))
    return int(found[-1].stem.split("_")[1]) if found else None


class Trainer:
    """Runs the joint masked-token objective over speech and text corpora."""

    def __init__(self, model: JointModel, speech: Sequence[TokenSequence], text: Sequence[TokenSequence],
                 config: TrainConfig, mask_config: MaskConfig | None = None, out_dir=None,
                 text_upsampling: tuple[UpsampleConfig, PhonemeVocab | None] | None = None):
        self.model = model
        self.config = config
        self.mask_config = mask_config or MaskConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.state = AdamState.zeros_like(model.params)
        self.step = 0
        self.metrics: list[dict] = []
        max_len = model.config.max_len
        self.streams: dict[str, BatchStream] = {}
        if config.speech_ratio:
            self.streams[SPEECH] = BatchStream(speech, SPEECH, config.tokens_per_batch, max_len,
                                               config.seed)
        if config.text_ratio:
            self.streams[TEXT] = BatchStream(text, TEXT, config.tokens_per_batch, max_len,
                                             config.seed, text_upsampling, config.freeze_repeats)

    def restore(self, step: int) -> None:
        """Load model and optimizer state saved at ``step`` under ``out_dir``."""
        model_path, state_path = checkpoint_paths(self.out_dir, step)
        model, _ = load_checkpoint(model_path)
        for name, p in self.model.params.items():
            p.data = model.params[name].data.copy()
        self.step, self.state, consumed, _ = load_train_state(state_path)
        for modality, n in consumed.items():
            if modality in self.streams:
                self.streams[modality].skip(n)
        metrics_path = self.out_dir / "metrics.jsonl"
        if metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines()
                    if ln and json.loads(ln)["step"] <= step]
            metrics_path.write_text("".join(ln + "\n" for ln in kept))
            self.metrics = [json.loads(ln) for ln in kept]

    def save(self) -> None:
        if self.out_dir is None:
            return
        model_path, state_path = checkpoint_paths(self.out_dir, self.step)
        model_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model_path, self.model, self.step)
        consumed = {m: s.consumed for m, s in self.streams.items()}
        save_train_state(state_path, self.step, self.state, consumed, self.config.seed)

    def train_step(self) -> dict:
        step = self.step + 1
        modality = modality_at(step, self.config)
        seqs = self.streams[modality].next()
        batch = prepare_batch(seqs, modality, self.model, self.mask_config, self.config.seed, step)
        lr = lr_at(step, self.config)
        params = self.model.params
        with nm.GradTape() as tape:
            loss, pred = forward_loss(self.model, batch)
        record = {"step": step, "modality": modality}
        self.step = step
        if loss.empty:
            # nothing masked in the whole batch: keep the weights
            record.update(loss=0.0, masked_acc=0.0, lr=lr, mask_fraction=0.0)
            return record
        raw = tape.backward(loss.value, params.values())
        grads = {name: raw[p] for name, p in params.items()}
        clip_grad_norm(grads, self.config.grad_clip)
        adam_step(params, grads, self.state, lr, self.config)
        acc = float((pred == batch.targets).mean())
        record.update(loss=float(loss.value.data), masked_acc=acc, lr=lr,
                      mask_fraction=loss.count / max(batch.num_tokens, 1))
        return record

    def run(self, until: int | None = None) -> list[dict]:
        """Train up to step ``until`` (default ``total_steps``), logging and checkpointing."""
        until = self.config.total_steps if until is None else min(until, self.config.total_steps)
        metrics_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if self.step == 0:
                self.save()
            metrics_fh = open(self.out_dir / "metrics.jsonl", "a" if self.step else "w")
        try:
            while self.step < until:
                record = self.train_step()
                self.metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                if self.step % 100 == 0:
                    log.info("step %d %s loss %.4f acc %.3f lr %.2e", record["step"],
                             record["modality"], record["loss"], record["masked_acc"], record["lr"])
                if self.step % self.config.checkpoint_interval == 0 or self.step == until:
                    if metrics_fh is not None:
                        metrics_fh.flush()
                    self.save()
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return self.metrics


def train(speech: Sequence[TokenSequence], text: Sequence[TokenSequence], model: JointModel,
          config: TrainConfig, mask_config: MaskConfig | None = None, out_dir=None,
          text_upsampling=None, until: int | None = None) -> tuple[JointModel, list[dict]]:
    trainer = Trainer(model, speech, text, config, mask_config, out_dir, text_upsampling)
    return model, trainer.run(until)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    unigram_accuracy: float
    masked: int


def unigram_majority(corpus: Sequence[TokenSequence]) -> int:
    ids = np.concatenate([s.ids for s in corpus if len(s)])
    return int(np.bincount(ids).argmax())


def evaluate(model: JointModel, corpus: Sequence[TokenSequence], modality: str,
             mask_config: MaskConfig, seed: int, tokens_per_batch: int,
             majority_token: int | None = None) -> EvalResult:
    """Masked-token loss and accuracy, next to always guessing the most frequent token."""
    if majority_token is None:
        majority_token = unigram_majority(corpus)
    batches = make_batches(corpus, tokens_per_batch, derive_seed(seed, "eval"), model.config.max_len)
    total_loss, correct, majority, count = 0.0, 0, 0, 0
    for i, seqs in enumerate(batches):
        batch = prepare_batch(seqs, modality, model, mask_config, derive_seed(seed, "eval-mask"), i)
        loss, pred = forward_loss(model, batch)
        if loss.empty:
            continue
        total_loss += float(loss.value.data) * loss.count
        correct += int((pred == batch.targets).sum())
        majority += int((batch.targets == majority_token).sum())
        count += loss.count
    if count == 0:
        raise ContractError("evaluation masked no tokens")
    return EvalResult(total_loss / count, correct / count, majority / count, count)
