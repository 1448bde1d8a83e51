"""Encoder-decoder Transformer with plain, DMB or MoE sub-layers.

Post-norm residual blocks, sinusoidal positions, and (by default) one
embedding table shared by source, target and the output projection.  Every
branched sub-layer contributes a gating unit; the training objective is the
cross-entropy plus ``alpha`` times the mean auxiliary loss over those units.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gating import DMB, MOE, GateOutput, diversity_loss, entropy_loss, pool
from .layers import PLAIN, FfnLayer, MhaLayer
from .tensor import Tensor

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


@dataclass
class ModelConfig:
    variant: str = PLAIN
    d: int = 128
    d_f: int = 512
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    n_branches: int = 4
    k: int = 2
    alpha: float = 0.1
    vocab_size: int = 36992
    tie_embeddings: bool = True
    dropout: float = 0.0
    label_smoothing: float = 0.0
    max_len: int = 256
    shared_private: bool = True
    branch_attention: bool = True
    branch_ffn: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in (PLAIN, DMB, MOE):
            raise ValueError(f"variant must be plain, dmb or moe, not {self.variant!r}")
        if self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.n_branches < 1:
            raise ValueError("n_branches must be >= 1")
        if self.variant == MOE and not 1 <= self.k <= self.n_branches:
            raise ValueError(f"k must lie in [1, {self.n_branches}]")
        for name in ("d", "d_f", "heads", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(fields)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    def gated_sublayers(self) -> list[str]:
        """Identifiers of the sub-layers that carry a gating unit."""
        if self.variant == PLAIN:
            return []
        ids = []
        for i in range(self.enc_layers):
            if self.branch_attention:
                ids.append(f"enc.{i}.self_attn")
            if self.branch_ffn:
                ids.append(f"enc.{i}.ffn")
        for i in range(self.dec_layers):
            if self.branch_attention:
                ids += [f"dec.{i}.self_attn", f"dec.{i}.cross_attn"]
            if self.branch_ffn:
                ids.append(f"dec.{i}.ffn")
        return ids


PRESETS = {
    "micro": dict(d=32, d_f=128, heads=4, enc_layers=2, dec_layers=2, n_branches=2,
                  vocab_size=30, max_len=64),
    "tiny": dict(d=128, d_f=512, heads=8, enc_layers=6, dec_layers=6, n_branches=4),
    "small": dict(d=256, d_f=1024, heads=8, enc_layers=6, dec_layers=6, n_branches=4),
}


def preset(name: str, variant: str = PLAIN, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name], variant=variant)
    values.update(overrides)
    return ModelConfig(**values)


def sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d - d // 2])
    return table


class LayerNorm:
    def __init__(self, d: int, eps: float, name: str):
        self.gain = T.parameter(np.ones(d), name=f"{name}.gain")
        self.bias = T.parameter(np.zeros(d), name=f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self):
        return {"gain": self.gain, "bias": self.bias}


def _sub_variant(cfg: ModelConfig, branched: bool) -> str:
    return cfg.variant if branched else PLAIN


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, i: int, rng):
        kw = dict(n_branches=cfg.n_branches, k=cfg.k, rng=rng, shared_private=cfg.shared_private)
        self.self_attn = MhaLayer(_sub_variant(cfg, cfg.branch_attention), cfg.d, cfg.heads,
                                  gate_id=f"enc.{i}.self_attn", **kw)
        self.ffn = FfnLayer(_sub_variant(cfg, cfg.branch_ffn), cfg.d, cfg.d_f,
                            gate_id=f"enc.{i}.ffn", **kw)
        self.norm1 = LayerNorm(cfg.d, cfg.ln_eps, f"enc.{i}.norm1")
        self.norm2 = LayerNorm(cfg.d, cfg.ln_eps, f"enc.{i}.norm2")

    def sublayers(self):
        return {"self_attn": self.self_attn, "ffn": self.ffn,
                "norm1": self.norm1, "norm2": self.norm2}


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, i: int, rng):
        kw = dict(n_branches=cfg.n_branches, k=cfg.k, rng=rng, shared_private=cfg.shared_private)
        attn_variant = _sub_variant(cfg, cfg.branch_attention)
        self.self_attn = MhaLayer(attn_variant, cfg.d, cfg.heads, causal=True,
                                  gate_id=f"dec.{i}.self_attn", **kw)
        self.cross_attn = MhaLayer(attn_variant, cfg.d, cfg.heads,
                                   gate_id=f"dec.{i}.cross_attn", **kw)
        self.ffn = FfnLayer(_sub_variant(cfg, cfg.branch_ffn), cfg.d, cfg.d_f,
                            gate_id=f"dec.{i}.ffn", **kw)
        self.norm1 = LayerNorm(cfg.d, cfg.ln_eps, f"dec.{i}.norm1")
        self.norm2 = LayerNorm(cfg.d, cfg.ln_eps, f"dec.{i}.norm2")
        self.norm3 = LayerNorm(cfg.d, cfg.ln_eps, f"dec.{i}.norm3")

    def sublayers(self):
        return {"self_attn": self.self_attn, "cross_attn": self.cross_attn, "ffn": self.ffn,
                "norm1": self.norm1, "norm2": self.norm2, "norm3": self.norm3}


@dataclass
class Encoded:
    """Encoder output for ``batch`` sequences of (padded) length ``length``."""

    memory: Tensor
    batch: int
    length: int
    valid: np.ndarray
    records: list = field(default_factory=list)


@dataclass
class LossBreakdown:
    total: Tensor
    lm: float
    diversity: float
    entropy: float
    aux: float
    n_gates: int
    utilization: dict = field(default_factory=dict)
    confidence: dict = field(default_factory=dict)


class TransformerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.folded = False
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))
        d, v = cfg.d, cfg.vocab_size
        self.embed = T.parameter(rng.normal(0.0, d ** -0.5, size=(v, d)), name="embed")
        if not cfg.tie_embeddings:
            self.tgt_embed = T.parameter(rng.normal(0.0, d ** -0.5, size=(v, d)), name="tgt_embed")
            self.out_proj = T.parameter(rng.normal(0.0, d ** -0.5, size=(v, d)), name="out_proj")
        self.pos_table = sinusoidal_table(cfg.max_len, d)
        self.encoder = [EncoderLayer(cfg, i, rng) for i in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(cfg, i, rng) for i in range(cfg.dec_layers)]

    # ------------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        if not self.cfg.tie_embeddings:
            out["tgt_embed"] = self.tgt_embed
            out["out_proj"] = self.out_proj
        for prefix, stack in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(stack):
                for sub_name, sub in layer.sublayers().items():
                    for n, t in sub.named_parameters().items():
                        out[f"{prefix}.{i}.{sub_name}.{n}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def branched_layers(self):
        for stack in (self.encoder, self.decoder):
            for layer in stack:
                for sub in layer.sublayers().values():
                    if getattr(sub, "gate", None) is not None:
                        yield sub

    def gate_ids(self) -> list[str]:
        return [layer.gate_id for layer in self.branched_layers()]

    def fold(self) -> "TransformerModel":
        """Replace shared/private storage by materialized branch weights, in place."""
        for layer in self.branched_layers():
            layer.fold()
        self.folded = True
        return self

    # ------------------------------------------------------------------ forward

    def _check_tokens(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}")

    def _embed(self, ids: np.ndarray, table: Tensor, offset: int = 0) -> Tensor:
        batch, length = ids.shape
        x = T.scale(T.take_rows(table, ids.reshape(-1)), math.sqrt(self.cfg.d))
        pos = self.pos_table[offset : offset + length]
        pos = np.tile(pos, (batch, 1)).astype(x.data.dtype)
        return T.add(x, T.Tensor(pos))

    def _drop(self, x: Tensor, training: bool) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.dropout_rng, training)

    def encode(self, src: np.ndarray, src_valid: np.ndarray | None = None,
               training: bool = False) -> Encoded:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        self._check_tokens(src)
        batch, length = src.shape
        if src_valid is None:
            src_valid = np.ones_like(src, dtype=bool)
        rows_valid = src_valid.reshape(-1)
        x = self._drop(self._embed(src, self.embed), training)
        records: list[GateOutput] = []
        for layer in self.encoder:
            a, r = layer.self_attn(x, x, x, batch, key_valid=src_valid, q_valid=rows_valid,
                                   kv_valid=rows_valid, training=training)
            records += r
            x = layer.norm1(T.add(x, self._drop(a, training)))
            f, r = layer.ffn(x, rows_valid, training)
            records += r
            x = layer.norm2(T.add(x, self._drop(f, training)))
        return Encoded(x, batch, length, src_valid, records)

    def decode(self, enc: Encoded, tgt_in: np.ndarray, tgt_valid: np.ndarray | None = None,
               training: bool = False, state: list | None = None, offset: int = 0):
        """Decoder states for ``tgt_in`` ([batch, T]) and the gate records.

        With ``state`` (one dict per layer, see :meth:`start_state`), only the
        new positions are processed and attention reuses cached keys/values.
        """
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        self._check_tokens(tgt_in)
        batch = tgt_in.shape[0]
        if tgt_valid is None:
            tgt_valid = np.ones_like(tgt_in, dtype=bool)
        rows_valid = tgt_valid.reshape(-1)
        mem_valid = enc.valid.reshape(-1)
        table = self.embed if self.cfg.tie_embeddings else self.tgt_embed
        x = self._drop(self._embed(tgt_in, table, offset), training)
        records: list[GateOutput] = []
        for i, layer in enumerate(self.decoder):
            cache = None if state is None else state[i]
            a, r = layer.self_attn(x, x, x, batch, q_valid=rows_valid, kv_valid=rows_valid,
                                   training=training,
                                   cache=None if cache is None else cache["self"])
            records += r
            x = layer.norm1(T.add(x, self._drop(a, training)))
            c, r = layer.cross_attn(x, enc.memory, enc.memory, batch, key_valid=enc.valid,
                                    q_valid=rows_valid, kv_valid=mem_valid, training=training,
                                    cache=None if cache is None else cache["cross"])
            records += r
            x = layer.norm2(T.add(x, self._drop(c, training)))
            f, r = layer.ffn(x, rows_valid, training)
            records += r
            x = layer.norm3(T.add(x, self._drop(f, training)))
        return x, records

    def project(self, h: Tensor) -> Tensor:
        table = self.embed if self.cfg.tie_embeddings else self.out_proj
        return T.matmul(h, T.transpose(table), tag="output")

    def start_state(self) -> list:
        return [{"self": {}, "cross": {}} for _ in self.decoder]

    def forward(self, src, tgt_in, src_valid=None, tgt_valid=None, training=False):
        enc = self.encode(src, src_valid, training)
        h, records = self.decode(enc, tgt_in, tgt_valid, training)
        return self.project(h), enc.records + records

    # ------------------------------------------------------------------ loss

    def total_loss(self, batch, training: bool = True) -> LossBreakdown:
        logits, records = self.forward(batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask,
                                       training)
        lm = T.cross_entropy(logits, batch.tgt_out.reshape(-1), self.cfg.label_smoothing,
                             mask=batch.tgt_mask.reshape(-1))
        return combine_losses(lm, records, self.cfg)


def combine_losses(lm: Tensor, records: list[GateOutput], cfg: ModelConfig) -> LossBreakdown:
    """``lm + alpha * mean over gating units of (diversity + entropy)``.

    Each unit pools every row it routed in this batch.  MoE units contribute
    the diversity term only.
    """
    by_gate: dict[str, list[GateOutput]] = {}
    for r in records:
        by_gate.setdefault(r.gate_id, []).append(r)
    if not by_gate:
        return LossBreakdown(lm, float(lm.data), 0.0, 0.0, 0.0, 0)
    aux_terms, ds, es = [], [], []
    utilization, confidence = {}, {}
    for gate_id, outs in by_gate.items():
        probs = pool(outs)
        ld = diversity_loss(probs)
        ds.append(float(ld.data))
        term = ld
        if outs[0].mode == DMB:
            le = entropy_loss(probs)
            es.append(float(le.data))
            term = T.add(ld, le)
        aux_terms.append(term)
        sel = np.concatenate([o.branch_of_rows()[o.valid] if o.valid is not None
                              else o.branch_of_rows() for o in outs])
        n = probs.shape[1]
        utilization[gate_id] = np.bincount(sel, minlength=n) / max(sel.size, 1)
        confidence[gate_id] = float(probs.data.max(axis=1).mean()) if probs.shape[0] else 1.0
    aux = aux_terms[0]
    for t in aux_terms[1:]:
        aux = T.add(aux, t)
    aux = T.scale(aux, 1.0 / len(aux_terms))
    total = T.add(lm, T.scale(aux, cfg.alpha))
    return LossBreakdown(total, float(lm.data), float(np.mean(ds)),
                         float(np.mean(es)) if es else 0.0, float(aux.data), len(aux_terms),
                         utilization, confidence)


# ---------------------------------------------------------------------- single-sequence API


def encode(model: TransformerModel, src) -> Encoded:
    return model.encode(np.asarray(src, dtype=np.int64)[None, :])


def decode_step(model: TransformerModel, memory: Encoded, prefix):
    """Next-token logits ``[V]`` after ``prefix`` (full recomputation)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size == 0:
        raise ValueError("prefix must be non-empty (start with BOS)")
    h, records = model.decode(memory, prefix[None, :])
    last = T.Tensor(h.data[-1:])
    return model.project(last).data[0], records
