"""Modality-agnostic Transformer encoder with a cosine-similarity MLM head.

Speech and text differ only in their token and position tables (``U``,
``U_pos`` and ``V``, ``V_pos``); every encoder weight is shared. Each token
table carries one extra trailing row for the mask token, which is never a
prediction candidate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import numeric as nm
from .container import read_container, write_container
from .errors import ConfigError, ContractError
from .masking import MaskPlan
from .numeric import Tensor
from .rng import stream
from .sequence import SPEECH, TEXT, TokenSequence

CHECKPOINT_MAGIC = b"TV2M"
_NEG_INF = -1e9


@dataclass
class ModelConfig:
    speech_vocab: int = 500
    text_vocab: int = 347
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 1024
    max_len: int = 1024
    tau: float = 0.1
    final_ln: bool = True
    strict_equation: bool = False
    ln_eps: float = 1e-5
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _block_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    p = f"blocks.{i}."
    return {
        p + "ln1.gain": (d,), p + "ln1.bias": (d,),
        p + "attn.q.w": (d, d), p + "attn.q.b": (d,),
        p + "attn.k.w": (d, d), p + "attn.k.b": (d,),
        p + "attn.v.w": (d, d), p + "attn.v.b": (d,),
        p + "attn.o.w": (d, d), p + "attn.o.b": (d,),
        p + "ln2.gain": (d,), p + "ln2.bias": (d,),
        p + "mlp.fc1.w": (d, f), p + "mlp.fc1.b": (f,),
        p + "mlp.fc2.w": (f, d), p + "mlp.fc2.b": (d,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        "U": (cfg.speech_vocab + 1, d), "U_pos": (cfg.max_len, d),
        "V": (cfg.text_vocab + 1, d), "V_pos": (cfg.max_len, d),
    }
    for i in range(cfg.n_layers):
        shapes.update(_block_shapes(cfg, i))
    if cfg.final_ln:
        shapes["final_ln.gain"] = (d,)
        shapes["final_ln.bias"] = (d,)
    shapes["head.W"] = (d, d)
    return shapes


def no_decay(name: str) -> bool:
    """Embeddings, layer-norm parameters and biases are exempt from weight decay."""
    return name in ("U", "U_pos", "V", "V_pos") or ".ln" in name or name.startswith("final_ln") \
        or name.endswith(".b")


class JointModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        shapes = parameter_shapes(config)
        if set(shapes) != set(params):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ContractError(f"parameter mismatch, missing={missing} extra={extra}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=config.dtype)
            if arr.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "JointModel":
        rng = stream(seed, "init")
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".bias") or name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, config.init_std, size=shape)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def vocab_size(self, modality: str) -> int:
        return self.config.speech_vocab if modality == SPEECH else self.config.text_vocab

    def mask_id(self, modality: str) -> int:
        return self.vocab_size(modality)

    def tables(self, modality: str) -> tuple[Tensor, Tensor]:
        if modality == SPEECH:
            return self.params["U"], self.params["U_pos"]
        if modality == TEXT:
            return self.params["V"], self.params["V_pos"]
        raise ContractError(f"unknown modality {modality!r}")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def embed(ids, model: JointModel, modality: str | None = None) -> Tensor:
    """Token embedding plus absolute position embedding for one modality.

    ``ids`` is a :class:`TokenSequence`, a 1-D id array, or a 2-D
    ``[batch, time]`` array (padding entries may hold any valid id).
    """
    if isinstance(ids, TokenSequence):
        modality = modality or ids.modality
        ids = ids.ids
    if modality is None:
        raise ContractError("embed needs a modality")
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1] if ids.ndim else 0
    if length > model.config.max_len:
        raise ContractError(f"sequence length {length} exceeds max_len {model.config.max_len}")
    table, pos = model.tables(modality)
    tok = nm.embedding_lookup(table, ids)
    return tok + nm.take_rows(pos, np.arange(length))


class EncoderOutput(NamedTuple):
    hidden: Tensor
    layers: list[Tensor] | None = None


def _linear(x: Tensor, model: JointModel, prefix: str) -> Tensor:
    return nm.matmul(x, model[prefix + ".w"]) + model[prefix + ".b"]


def attention(x: Tensor, model: JointModel, prefix: str, key_mask: np.ndarray | None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x`` [B, T, d]."""
    b, t, d = x.shape
    h = model.config.n_heads
    dh = d // h

    def heads(name):
        y = _linear(x, model, prefix + name)
        return nm.transpose(nm.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(".q"), heads(".k"), heads(".v")
    scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, _NEG_INF).astype(x.dtype)[:, None, None, :]
        scores = scores + Tensor(bias)
    probs = nm.softmax_rows(scores)
    out = nm.matmul(probs, v)
    out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return _linear(out, model, prefix + ".o")


def mlp(x: Tensor, model: JointModel, prefix: str) -> Tensor:
    return _linear(nm.gelu(_linear(x, model, prefix + ".fc1")), model, prefix + ".fc2")


def _ln(x: Tensor, model: JointModel, prefix: str) -> Tensor:
    return nm.layer_norm(x, model[prefix + ".gain"], model[prefix + ".bias"], model.config.ln_eps)


def encode(x: Tensor, model: JointModel, key_mask: np.ndarray | None = None,
           keep_layers: bool = False) -> EncoderOutput:
    """Apply the pre-LN block stack to ``x`` of shape [T, d] or [B, T, d].

    ``key_mask`` ([B, T] booleans) marks real tokens; padded keys get no
    attention weight.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = nm.reshape(x, (1,) + x.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None, :]
    cfg = model.config
    layers = [] if keep_layers else None
    z = x
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        zhat = attention(_ln(z, model, p + ".ln1"), model, p + ".attn", key_mask) + z
        if cfg.strict_equation:
            z = mlp(_ln(zhat, model, p + ".ln2") + zhat, model, p + ".mlp")
        else:
            z = mlp(_ln(zhat, model, p + ".ln2"), model, p + ".mlp") + zhat
        if keep_layers:
            layers.append(nm.reshape(z, z.shape[1:]) if squeeze else z)
    if cfg.final_ln and cfg.n_layers:
        z = _ln(z, model, "final_ln")
    if squeeze:
        z = nm.reshape(z, z.shape[1:])
    return EncoderOutput(z, layers)


def candidate_embeddings(model: JointModel, modality: str) -> Tensor:
    table, _ = model.tables(modality)
    return nm.take_rows(table, np.arange(model.vocab_size(modality)))


def tmlm_logits(hidden: Tensor, model: JointModel, modality: str) -> Tensor:
    """Cosine similarity between projected states and token embeddings, over tau.

    ``hidden`` is [n, d]; the result is [n, vocab] with the mask row excluded.
    """
    proj = nm.matmul(hidden, model["head.W"])
    cands = candidate_embeddings(model, modality)
    return nm.cosine_matrix(proj, cands) * (1.0 / model.config.tau)


class MaskedLoss(NamedTuple):
    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def tmlm_loss(logits: Tensor, plan: MaskPlan) -> MaskedLoss:
    """Mean negative log-likelihood of the targets at masked positions only."""
    if plan.targets is None:
        raise ContractError("mask plan has no recorded targets")
    if plan.positions.size == 0:
        return MaskedLoss(Tensor(np.zeros((), dtype=logits.dtype)), 0)
    picked = nm.take_rows(logits, plan.positions)
    return MaskedLoss(nm.cross_entropy(picked, plan.targets), int(plan.positions.size))


def masked_loss(hidden: Tensor, flat_positions: np.ndarray, targets: np.ndarray,
                model: JointModel, modality: str) -> tuple[MaskedLoss, np.ndarray]:
    """Loss over masked rows of a flattened [B*T, d] hidden state; also returns argmax ids."""
    if flat_positions.size == 0:
        return MaskedLoss(Tensor(np.zeros((), dtype=hidden.dtype)), 0), np.zeros(0, np.int64)
    d = hidden.shape[-1]
    rows = nm.take_rows(nm.reshape(hidden, (-1, d)), flat_positions)
    logits = tmlm_logits(rows, model, modality)
    pred = logits.data.argmax(axis=1)
    return MaskedLoss(nm.cross_entropy(logits, targets), int(flat_positions.size)), pred


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: JointModel, step: int = 0) -> None:
    meta = {"config": asdict(model.config), "step": int(step)}
    write_container(path, CHECKPOINT_MAGIC, meta, model.state_arrays())


def load_checkpoint(path) -> tuple[JointModel, int]:
    meta, tensors = read_container(path, CHECKPOINT_MAGIC)
    cfg = ModelConfig.from_dict(meta["config"])
    return JointModel(cfg, tensors), int(meta.get("step", 0))
