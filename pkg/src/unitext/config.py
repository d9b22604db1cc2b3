"""Layered run configuration: preset, then config file, then ``--set`` overrides.

Config files are flat ``section.key=value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus_io import LogMelConfig
from .errors import ConfigError
from .masking import MaskConfig
from .model import ModelConfig
from .rng import derive_seed
from .speech import KMeansConfig
from .trainer import TrainConfig


@dataclass
class CodebookSection:
    k: int = 500
    max_iters: int = 100
    tol: float = 1e-4
    stride: int = 1


@dataclass
class TextSection:
    upsample: str = "repeat"
    geometric_mean: float = 4.0
    stats: str = ""
    # redraw up-sampling repeats every training epoch
    epoch_resample: bool = False


@dataclass
class AnalysisSection:
    k: int = 10
    method: str = "pca"


@dataclass
class RunConfig:
    seed: int = 0
    features: LogMelConfig = field(default_factory=LogMelConfig)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    text: TextSection = field(default_factory=TextSection)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    SECTIONS = ("features", "codebook", "text", "mask", "model", "train", "analysis")

    def resolve(self) -> "RunConfig":
        """Propagate the global seed into the sections that carry their own."""
        self.train.seed = self.seed
        return self

    def kmeans(self) -> KMeansConfig:
        c = self.codebook
        return KMeansConfig(c.k, c.max_iters, c.tol, derive_seed(self.seed, "kmeans") % 2**32)

    def upsample_seed(self) -> int:
        return derive_seed(self.seed, "upsample")

    def dump(self) -> str:
        lines = [f"seed={self.seed}"]
        for name in self.SECTIONS:
            section = getattr(self, name)
            for f in dataclasses.fields(section):
                lines.append(f"{name}.{f.name}={_format(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path, header: str = "") -> None:
        lines = "".join(f"# {ln}\n" for ln in header.splitlines())
        Path(path).write_text(lines + self.dump(), encoding="utf-8")

    def set(self, key: str, raw: str) -> None:
        if key == "seed":
            self.seed = int(raw)
            return
        name, _, attr = key.partition(".")
        if name not in self.SECTIONS or not attr:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(self, name)
        types = {f.name: f for f in dataclasses.fields(section)}
        if attr not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse(raw, getattr(section, attr), key)
        # rebuild so the section's own validation runs
        updated = dataclasses.replace(section, **{attr: value})
        setattr(self, name, updated)

    def apply(self, pairs: Iterable[str]) -> "RunConfig":
        for item in pairs:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {item!r}")
            self.set(key.strip(), raw.strip())
        return self

    def load(self, path) -> "RunConfig":
        items = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                items.append(line)
        return self.apply(items)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def preset(name: str) -> RunConfig:
    """Hyperparameter bundles.

    ``base``: the full-scale recipe (768-d, 12-layer encoder, 400k steps,
    16384-token batches); kept for reference, far beyond a single CPU.
    ``ablation``: the small 256-d / 4-head / 1024-FFN encoder with desk training.
    ``desk``: a laptop-sized encoder with the desk schedule.
    """
    cfg = RunConfig()
    if name == "base":
        cfg.model = ModelConfig(d_model=768, n_layers=12, n_heads=12, d_ff=3072, max_len=1024)
        cfg.train = TrainConfig(peak_lr=5e-4, warmup_steps=32000, total_steps=400000,
                                tokens_per_batch=16384)
    elif name == "ablation":
        cfg.model = ModelConfig(d_model=256, n_layers=6, n_heads=4, d_ff=1024, max_len=1024)
        cfg.train = TrainConfig(warmup_steps=1000, total_steps=20000, tokens_per_batch=4096)
    elif name == "desk":
        cfg.model = ModelConfig(d_model=64, n_layers=2, n_heads=4, d_ff=256, max_len=256)
        cfg.train = TrainConfig(warmup_steps=1000, total_steps=20000, tokens_per_batch=4096,
                                checkpoint_interval=2000)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return cfg
