"""Plain, dynamic multi-branch and mixture-of-experts FFN / attention sub-layers.

Branched layers keep ``N`` parameter sets of identical shape.  With
shared-private reparameterization each branch is ``shared + private[i]``; the
sum is materialized before every matmul so that a folded copy of the weights
reproduces training-mode outputs bit for bit.

Per-position routing groups rows by branch and runs one dense matmul per
non-empty group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gating import DMB, MOE, GateOutput, GatingUnit, xavier_uniform
from .tensor import ContractError, Tensor

PLAIN = "plain"
VARIANTS = (PLAIN, DMB, MOE)


class BranchedParams:
    """``N`` same-shaped parameter sets, optionally written as shared + private.

    ``shared`` is None when the reparameterization is disabled; ``folded``
    holds materialized per-branch weights and takes precedence when present.
    """

    def __init__(self, shapes: dict[str, tuple], shared=None, private=None, folded=None):
        self.shapes = dict(shapes)
        self.shared: dict[str, Tensor] | None = shared
        self.private: list[dict[str, Tensor]] | None = private
        self.folded: list[dict[str, Tensor]] | None = folded
        sets = ([shared] if shared else []) + list(private or []) + list(folded or [])
        for s in sets:
            for name, shape in self.shapes.items():
                if s[name].shape != tuple(shape):
                    raise T.DimensionError(f"{name}: expected {shape}, got {s[name].shape}")

    @classmethod
    def create(cls, shapes, n_branches, rng, shared_private=True, prefix=""):
        def init(name, shape, i):
            label = f"{prefix}{name}"
            if len(shape) == 1:
                return T.parameter(np.zeros(shape), name=label)
            return T.parameter(xavier_uniform(rng, *shape), name=label)

        private = [{n: init(n, s, i) for n, s in shapes.items()} for i in range(n_branches)]
        shared = None
        if shared_private and n_branches > 1:
            shared = {n: T.parameter(np.zeros(s), name=f"{prefix}{n}") for n, s in shapes.items()}
        return cls(shapes, shared, private)

    @property
    def n_branches(self) -> int:
        return len(self.folded if self.folded is not None else self.private)

    def branch(self, i: int) -> dict[str, Tensor]:
        if self.folded is not None:
            return self.folded[i]
        if self.shared is None:
            return self.private[i]
        return {n: T.add(self.shared[n], self.private[i][n]) for n in self.shapes}

    def named_parameters(self) -> dict[str, Tensor]:
        """Storage tensors: shared/private while training, per-branch once folded."""
        out = {}
        if self.folded is not None and self.private is None:
            for i, s in enumerate(self.folded):
                out.update({f"branch.{i}.{n}": t for n, t in s.items()})
            return out
        if self.shared is not None:
            out.update({f"shared.{n}": t for n, t in self.shared.items()})
        single = self.shared is None and len(self.private) == 1
        for i, s in enumerate(self.private):
            key = "" if single else (f"private.{i}." if self.shared is not None else f"branch.{i}.")
            out.update({f"{key}{n}": t for n, t in s.items()})
        return out


def fold(params: BranchedParams) -> BranchedParams:
    """Materialize ``shared + private[i]`` for every branch."""
    if params.private is None:
        raise ContractError("nothing to fold: private parameters are absent")
    if params.shared is None:
        folded = [{n: T.parameter(t.data.copy(), name=t.name) for n, t in s.items()}
                  for s in params.private]
    else:
        folded = [{n: T.parameter(params.shared[n].data + s[n].data, name=s[n].name)
                   for n in params.shapes} for s in params.private]
    return BranchedParams(params.shapes, params.shared, params.private, folded)


def folded_only(params: BranchedParams) -> BranchedParams:
    """Inference form that keeps just the materialized branches."""
    f = params if params.folded is not None else fold(params)
    return BranchedParams(params.shapes, None, None, f.folded)


def linear(x: Tensor, w: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    return T.add(T.matmul(x, w, tag=tag), b)


@dataclass
class Routing:
    """Row groups of one routed input: ``(branch, rows, weight column or None)``."""

    groups: list
    n_rows: int

    @classmethod
    def single(cls, n_rows: int, branch: int = 0) -> "Routing":
        return cls([(branch, None, None)], n_rows)

    @classmethod
    def from_gate(cls, out: GateOutput, n_branches: int) -> "Routing":
        n_rows = out.selection.shape[0]
        groups = []
        if out.mode == DMB:
            sel = out.selection
            if n_rows == 1 or (n_rows and (sel == sel[0]).all()):
                return cls.single(n_rows, int(sel[0]))
            for i in range(n_branches):
                rows = np.flatnonzero(sel == i)
                if rows.size:
                    groups.append((i, rows, None))
        else:
            for i in range(n_branches):
                rows = np.flatnonzero((out.selection == i).any(axis=1))
                if rows.size:
                    col = T.take_rows(T.column(out.probs, i), rows)
                    groups.append((i, rows, col))
        return cls(groups, n_rows)

    def branch_counts(self, n_branches: int) -> np.ndarray:
        counts = np.zeros(n_branches, dtype=np.int64)
        for i, rows, _ in self.groups:
            counts[i] += self.n_rows if rows is None else rows.size
        return counts

    def apply(self, x: Tensor, fn: Callable[[int, Tensor], Tensor | tuple]):
        """Run ``fn(branch, rows_of_x)`` per group and reassemble row order.

        ``fn`` may return a tuple of tensors; each is reassembled separately.
        Weighted groups (MoE) scale each output row by its mixture weight.
        """
        if len(self.groups) == 1 and self.groups[0][1] is None:
            return fn(self.groups[0][0], x)
        outs, idx = [], []
        for i, rows, col in self.groups:
            y = fn(i, T.take_rows(x, rows))
            ys = y if isinstance(y, tuple) else (y,)
            if col is not None:
                ys = tuple(T.mul(t, col) for t in ys)
            outs.append(ys)
            idx.append(rows)
        merged = tuple(T.scatter_rows([o[j] for o in outs], idx, self.n_rows)
                       for j in range(len(outs[0])))
        return merged if len(merged) > 1 else merged[0]


class BranchedLayer:
    """Common plumbing: variant, gate, branched params, per-call weight cache."""

    shapes: dict[str, tuple]

    def __init__(self, variant: str, d: int, n_branches: int, k: int, rng,
                 shared_private: bool = True, gate_id: str = "gate"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.d = d
        n = 1 if variant == PLAIN else n_branches
        self.params = BranchedParams.create(
            self.shapes, n, rng, shared_private=shared_private and variant == DMB,
            prefix=f"{gate_id}.")
        self.gate = None
        if variant != PLAIN:
            self.gate = GatingUnit.create(d, n_branches, rng, mode=variant, k=k, gate_id=gate_id)

    @property
    def n_branches(self) -> int:
        return self.params.n_branches

    @property
    def gate_id(self) -> str | None:
        return None if self.gate is None else self.gate.gate_id

    def route(self, x: Tensor, valid, training: bool, records: list, role: str = "in") -> Routing:
        if self.gate is None:
            return Routing.single(x.shape[0])
        out = self.gate(x, training)
        out.valid = valid
        out.role = role
        records.append(out)
        return Routing.from_gate(out, self.n_branches)

    def weights_cache(self):
        cache = {}

        def get(i):
            if i not in cache:
                cache[i] = self.params.branch(i)
            return cache[i]

        return get

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"params.{n}": t for n, t in self.params.named_parameters().items()}
        if self.gate is not None:
            out.update({f"gate.{n}": t for n, t in self.gate.parameters().items()})
        return out

    def fold(self) -> None:
        if self.variant == DMB:
            self.params = folded_only(self.params)


class FfnLayer(BranchedLayer):
    def __init__(self, variant, d, d_f, n_branches=4, k=2, rng=None, shared_private=True,
                 gate_id="ffn"):
        self.d_f = d_f
        self.shapes = {"w1": (d, d_f), "b1": (d_f,), "w2": (d_f, d), "b2": (d,)}
        super().__init__(variant, d, n_branches, k, rng or np.random.default_rng(0),
                         shared_private, gate_id)

    def forward(self, x: Tensor, valid=None, training=False):
        records: list[GateOutput] = []
        routing = self.route(x, valid, training, records)
        get = self.weights_cache()

        def expert(i, xr):
            p = get(i)
            hidden = T.relu(linear(xr, p["w1"], p["b1"], tag="ffn"))
            return linear(hidden, p["w2"], p["b2"], tag="ffn")

        return routing.apply(x, expert), records

    __call__ = forward


def ffn_forward(layer: FfnLayer, x: Tensor, training: bool = False):
    return layer.forward(x, training=training)


def attention_mask(batch: int, heads: int, n: int, m: int, key_valid=None, causal=False,
                   offset: int = 0, dtype=np.float32):
    """Additive mask broadcastable to ``[batch*heads, n, m]`` (None when unmasked).

    ``offset`` is the absolute position of the first query row (incremental
    decoding).
    """
    if key_valid is None and not causal:
        return None
    mask = np.zeros((batch, 1, n if causal else 1, m), dtype=dtype)
    if key_valid is not None:
        mask = np.where(np.asarray(key_valid, bool)[:, None, None, :], mask, -np.inf)
    if causal:
        future = np.arange(m)[None, :] > (np.arange(n)[:, None] + offset)
        mask = np.where(future[None, None], -np.inf, mask)
    mask = np.broadcast_to(mask, (batch, heads) + mask.shape[2:])
    return mask.reshape((batch * heads,) + mask.shape[2:]).astype(dtype)


class MhaLayer(BranchedLayer):
    def __init__(self, variant, d, heads, n_branches=4, k=2, rng=None, shared_private=True,
                 gate_id="attn", causal=False):
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide d ({d})")
        self.heads = heads
        self.causal = causal
        self.shapes = {}
        for name in "qkvo":
            self.shapes[f"w{name}"] = (d, d)
            self.shapes[f"b{name}"] = (d,)
        super().__init__(variant, d, n_branches, k, rng or np.random.default_rng(0),
                         shared_private, gate_id)

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, batch: int = 1, *,
                key_valid=None, q_valid=None, kv_valid=None, training=False,
                cache: dict | None = None):
        """Multi-head attention over ``batch`` sequences stacked row-wise.

        ``key_valid`` ([batch, m]) masks padded keys; ``q_valid``/``kv_valid``
        ([rows]) mark rows pooled into the auxiliary losses.  With a ``cache``
        dict, self-attention appends this call's keys/values to previous
        ones and cross-attention projects ``k_in``/``v_in`` once.
        """
        if q_in.shape[1] != self.d or k_in.shape[1] != self.d or v_in.shape[1] != self.d:
            raise T.DimensionError("attention inputs must all have the model width")
        records: list[GateOutput] = []
        get = self.weights_cache()

        def proj(*names):
            def fn(i, xr):
                p = get(i)
                outs = tuple(linear(xr, p[f"w{c}"], p[f"b{c}"], tag="attn_proj") for c in names)
                return outs if len(outs) > 1 else outs[0]
            return fn

        self_attn = q_in is k_in and k_in is v_in
        r_q = self.route(q_in, q_valid, training, records)
        if self_attn:
            q, k, v = r_q.apply(q_in, proj("q", "k", "v"))
        else:
            q = r_q.apply(q_in, proj("q"))
            if cache is not None and "static_k" in cache:
                k, v = cache["static_k"], cache["static_v"]
            else:
                if k_in is v_in:
                    r_kv = self.route(k_in, kv_valid, training, records, "kv")
                    k, v = r_kv.apply(k_in, proj("k", "v"))
                else:
                    k = self.route(k_in, kv_valid, training, records, "k").apply(k_in, proj("k"))
                    v = self.route(v_in, kv_valid, training, records, "v").apply(v_in, proj("v"))
                if cache is not None:
                    cache["static_k"], cache["static_v"] = k, v

        n = q.shape[0] // batch
        offset = 0
        if self_attn and cache is not None:
            offset = cache.get("len", 0)
            if offset:
                k = _append_rows(cache["k"], k, batch)
                v = _append_rows(cache["v"], v, batch)
            cache["k"], cache["v"], cache["len"] = k, v, offset + n
        m = k.shape[0] // batch
        if self.causal and cache is None and n != m:
            raise ContractError("causal masking needs equal query and key lengths")

        mask = attention_mask(batch, self.heads, n, m, key_valid, self.causal,
                              offset, dtype=q.data.dtype)
        qh = T.split_heads(q, batch, self.heads)
        kh = T.split_heads(k, batch, self.heads)
        vh = T.split_heads(v, batch, self.heads)
        scores = T.scale(T.bmm(qh, kh, transpose_b=True, tag="attn_score"),
                         1.0 / np.sqrt(self.d // self.heads))
        if mask is not None:
            scores = T.add(scores, T.Tensor(mask))
        ctx = T.bmm(T.softmax(scores, axis=-1), vh, tag="attn_context")
        h = T.merge_heads(ctx, batch)

        r_o = self.route(h, q_valid, training, records, "out")
        return r_o.apply(h, proj("o")), records

    __call__ = forward


def _append_rows(prev: Tensor, new: Tensor, batch: int) -> Tensor:
    """Concatenate per-sequence row blocks of two batch-major tensors."""
    d = prev.shape[1]
    a = prev.data.reshape(batch, -1, d)
    b = new.data.reshape(batch, -1, d)
    return T.Tensor(np.concatenate([a, b], axis=1).reshape(-1, d))


def mha_forward(layer: MhaLayer, q: Tensor, k: Tensor, v: Tensor, training: bool = False):
    return layer.forward(q, k, v, 1, training=training)
