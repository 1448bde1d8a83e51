"""Analytic parameter and Mult-Adds accounting, PTR, latency and int8 weights.

Mult-Adds count scalar multiply-accumulates in matrix products only: softmax,
layer norm, residual adds, activations and bias adds are free, and embedding
lookups cost nothing.  A forward pass is one sentence pair, source length S
and target length T, teacher-forced, with inference-mode gates (no MoE
noise).

The analytic model mirrors the executed one exactly: a gating unit is
evaluated once per distinct input it routes (queries, keys and values of
self-attention are the same rows, as are keys and values of cross-attention),
and an MoE row pays for ``k`` expert projections.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from .gating import DMB, MOE
from .model import EOS, ModelConfig, TransformerModel
from .layers import PLAIN

COMPONENTS = ("embeddings", "encoder", "decoder", "output_projection", "gates")

# Published reference rows: (label, #MA, BLEU, printed PTR).
REFERENCE_ROWS = [
    ("En-De Transformer (tiny)", 229.0e6, 21.0, 13.9),
    ("En-De Lite Transformer (tiny)", 286.6e6, 22.6, 13.3),
    ("En-De Transformer-MoE (tiny)", 313.2e6, 22.5, 12.7),
    ("En-De Transformer-DMB (tiny)", 229.6e6, 22.7, 15.0),
    ("En-De Transformer (small)", 623.2e6, 25.0, 10.0),
    ("En-De Lite Transformer (small)", 761.1e6, 25.6, 9.3),
    ("En-De HAT (small)", 2.1e9, 25.9, 5.7),
    ("En-De Transformer-MoE (small)", 956.6e6, 25.7, 8.3),
    ("En-De Transformer-DMB (small)", 624.3e6, 25.7, 10.3),
    ("Zh-En Transformer (tiny)", 209.7e6, 19.0, 13.2),
    ("Zh-En Transformer-MoE (tiny)", 293.9e6, 21.0, 12.2),
    ("Zh-En Transformer-DMB (tiny)", 210.3e6, 20.8, 14.3),
    ("Zh-En Transformer (small)", 584.6e6, 24.3, 10.1),
    ("Zh-En Transformer-MoE (small)", 918.1e6, 25.0, 8.3),
    ("Zh-En Transformer-DMB (small)", 585.7e6, 24.8, 10.2),
]


@dataclass
class CostReport:
    param_count: int = 0
    mult_adds: int = 0
    S: int | None = None
    T: int | None = None
    bleu: float | None = None
    params_breakdown: dict = field(default_factory=lambda: dict.fromkeys(COMPONENTS, 0))
    mult_adds_breakdown: dict = field(default_factory=lambda: dict.fromkeys(COMPONENTS, 0))
    routed_positions: int = 0
    latency: dict | None = None

    @property
    def ptr(self) -> float | None:
        if self.bleu is None or not self.mult_adds:
            return None
        return ptr(self.bleu, self.mult_adds)

    def to_text(self) -> str:
        lines = [f"#Params.  {self.param_count:>14,d}  ({self.param_count / 1e6:.1f}M)"]
        for k, v in self.params_breakdown.items():
            lines.append(f"  {k:<18}{v:>14,d}")
        if self.S is not None:
            lines.append(f"#MA. (S={self.S}, T={self.T})  {self.mult_adds:>14,d}  "
                         f"({self.mult_adds / 1e6:.1f}M)")
            for k, v in self.mult_adds_breakdown.items():
                lines.append(f"  {k:<18}{v:>14,d}")
        if self.ptr is not None:
            lines.append(f"BLEU {self.bleu:.2f}  PTR {self.ptr:.2f}")
        if self.latency:
            lines.append("latency " + " ".join(f"{k}={v:.6f}" for k, v in self.latency.items()))
        return "\n".join(lines)

    def to_kv(self) -> str:
        rows = [("param_count", self.param_count), ("mult_adds", self.mult_adds),
                ("S", self.S), ("T", self.T), ("bleu", self.bleu), ("ptr", self.ptr),
                ("routed_positions", self.routed_positions)]
        rows += [(f"params.{k}", v) for k, v in self.params_breakdown.items()]
        rows += [(f"mult_adds.{k}", v) for k, v in self.mult_adds_breakdown.items()]
        rows += [(f"latency.{k}", v) for k, v in (self.latency or {}).items()]
        return "\n".join(f"{k}={'' if v is None else v}" for k, v in rows) + "\n"


def ptr(bleu: float, mult_adds: float) -> float:
    """Performance-time ratio ``BLEU / sqrt(#Mult-Adds) * 1e4``."""
    if bleu == 0:
        return 0.0
    if mult_adds <= 0:
        raise ValueError("mult_adds must be positive")
    return bleu / np.sqrt(mult_adds) * 1e4


def _sets(cfg: ModelConfig, branched: bool, training: bool) -> int:
    """Parameter sets stored for one sub-layer."""
    if cfg.variant == PLAIN or not branched:
        return 1
    extra = 1 if training and cfg.variant == DMB and cfg.shared_private and cfg.n_branches > 1 else 0
    return cfg.n_branches + extra


def _gate_params(cfg: ModelConfig, training: bool) -> int:
    n, d = cfg.n_branches, cfg.d
    return n * d + n + (n * d if cfg.variant == MOE and training else 0)


def count_params(cfg: ModelConfig, training: bool = False) -> CostReport:
    """Closed-form parameter count.

    By default this is deployable storage: DMB branches folded (no shared
    copy) and no MoE noise weights.  ``training=True`` adds both.
    """
    d, f, v = cfg.d, cfg.d_f, cfg.vocab_size
    mha = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norm = 2 * d
    attn_sets = _sets(cfg, cfg.branch_attention, training)
    ffn_sets = _sets(cfg, cfg.branch_ffn, training)
    gate = _gate_params(cfg, training) if cfg.variant != PLAIN else 0

    r = CostReport()
    pb = r.params_breakdown
    pb["embeddings"] = v * d if cfg.tie_embeddings else 2 * v * d
    pb["output_projection"] = 0 if cfg.tie_embeddings else v * d
    pb["encoder"] = cfg.enc_layers * (attn_sets * mha + ffn_sets * ffn + 2 * norm)
    pb["decoder"] = cfg.dec_layers * (2 * attn_sets * mha + ffn_sets * ffn + 3 * norm)
    pb["gates"] = len(cfg.gated_sublayers()) * gate
    r.param_count = sum(pb.values())
    return r


def count_mult_adds(cfg: ModelConfig, S: int, T: int) -> CostReport:
    """Mult-Adds of one teacher-forced forward pass (source S, target T tokens)."""
    d, f, v = cfg.d, cfg.d_f, cfg.vocab_size
    moe = cfg.variant == MOE
    k_attn = cfg.k if moe and cfg.branch_attention else 1
    k_ffn = cfg.k if moe and cfg.branch_ffn else 1
    gate_row = cfg.n_branches * d if cfg.variant != PLAIN else 0
    gated_attn = cfg.variant != PLAIN and cfg.branch_attention
    gated_ffn = cfg.variant != PLAIN and cfg.branch_ffn

    enc = dec = 0
    rows = 0
    for _ in range(cfg.enc_layers):
        enc += 4 * S * d * d * k_attn + 2 * S * S * d
        enc += 2 * S * d * f * k_ffn
        rows += (2 * S if gated_attn else 0) + (S if gated_ffn else 0)
    for _ in range(cfg.dec_layers):
        dec += 4 * T * d * d * k_attn + 2 * T * T * d
        dec += (2 * T + 2 * S) * d * d * k_attn + 2 * T * S * d
        dec += 2 * T * d * f * k_ffn
        rows += ((2 * T) + (2 * T + S) if gated_attn else 0) + (T if gated_ffn else 0)

    r = CostReport(S=S, T=T)
    mb = r.mult_adds_breakdown
    mb["encoder"] = enc
    mb["decoder"] = dec
    mb["output_projection"] = T * d * v
    mb["gates"] = rows * gate_row
    r.routed_positions = rows
    r.mult_adds = sum(mb.values())
    r.params_breakdown = count_params(cfg).params_breakdown
    r.param_count = sum(r.params_breakdown.values())
    return r


def profile(cfg: ModelConfig, S: int = 30, T: int = 30, bleu: float | None = None) -> CostReport:
    r = count_mult_adds(cfg, S, T)
    r.bleu = bleu
    return r


# ---------------------------------------------------------------------- latency


def bench_latency(model: TransformerModel, seq_len: int = 30, mode: str = "greedy",
                  trials: int = 10, warmup: int = 2, beam: int = 4, lp_alpha: float = 0.6,
                  seed: int = 0) -> dict:
    """Wall-clock decode time of a ``seq_len``-token source into ``seq_len`` tokens.

    Output length is fixed (EOS is suppressed until ``seq_len``) so variants
    are compared on equal work.  Returns median, IQR and the raw samples.
    """
    from .inference import IncrementalDecoder, beam_search, greedy_search

    rng = np.random.default_rng(seed)
    src = rng.integers(EOS + 1, model.cfg.vocab_size, size=seq_len)
    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + trials):
            t0 = time.perf_counter()
            scorer = IncrementalDecoder(model, src)
            if mode == "greedy":
                greedy_search(scorer, seq_len, min_len=seq_len)
            elif mode == "beam":
                beam_search(scorer, beam, lp_alpha, seq_len, min_len=seq_len)
            else:
                raise ValueError(f"unknown mode {mode!r}")
            elapsed = time.perf_counter() - t0
            if i >= warmup:
                times.append(elapsed)
    q = statistics.quantiles(times, n=4) if len(times) > 1 else [times[0]] * 3
    return {"median": statistics.median(times), "iqr": q[2] - q[0], "samples": times}


# ---------------------------------------------------------------------- quantization


def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor absmax int8; an all-zero tensor gets scale 0."""
    absmax = float(np.abs(w).max()) if w.size else 0.0
    if absmax == 0.0:
        return np.zeros(w.shape, dtype=np.int8), 0.0
    scale = absmax / 127.0
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return q, scale


def quantizable(name: str, arr: np.ndarray) -> bool:
    """Weight matrices (including the embedding table) are quantized; vectors stay float."""
    return arr.ndim == 2


def quantize_int8(ckpt: ckpt_io.Checkpoint) -> ckpt_io.Checkpoint:
    tensors, scales = {}, {}
    for name, arr in ckpt.tensors.items():
        if quantizable(name, arr):
            tensors[name], scales[name] = quantize_tensor(arr)
        else:
            tensors[name] = arr
    return ckpt_io.Checkpoint(ckpt.config, tensors, ckpt.folded, scales, dict(ckpt.meta))


def dequantize_int8(ckpt: ckpt_io.Checkpoint) -> ckpt_io.Checkpoint:
    tensors = {n: ckpt_io.dequantize(a, ckpt.scales[n]) if n in ckpt.scales else a
               for n, a in ckpt.tensors.items()}
    return ckpt_io.Checkpoint(ckpt.config, tensors, ckpt.folded, {}, dict(ckpt.meta))
