"""Gating units: binary top-1 branch selection and noisy top-k expert mixing.

A DMB gate is a linear map followed by a softmax; the branch with the highest
probability is activated and nothing downstream of the selection is
differentiable, so the gate learns only from the diversity and entropy
losses.  An MoE gate keeps the softmax over its top-k logits as real-valued
mixture weights, which carry gradient from the main loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

DMB = "dmb"
MOE = "moe"

ENTROPY_FLOOR = 1e-12


class GateConfigError(ValueError):
    pass


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class GateOutput:
    """Routing decision for the ``M`` rows of one gate invocation.

    ``probs`` are the softmax activations ``a(x)`` (DMB) or the top-k mixture
    weights (MoE), one row per input row.  ``selection`` is ``[M]`` for DMB and
    ``[M, k]`` for MoE.  ``valid`` marks rows that take part in the auxiliary
    losses; padding rows are routed but never pooled.  ``role`` names the
    routed input: ``in`` (layer input or queries), ``kv``/``k``/``v`` (memory)
    or ``out`` (attention output before ``W_o``).
    """

    probs: Tensor
    selection: np.ndarray
    mode: str
    valid: np.ndarray | None = None
    gate_id: str | None = None
    role: str = "in"

    @property
    def weights(self) -> Tensor | None:
        return self.probs if self.mode == MOE else None

    def branch_of_rows(self) -> np.ndarray:
        """Top-1 branch per row (the argmax for MoE)."""
        return self.selection if self.selection.ndim == 1 else self.selection[:, 0]

    def pooled_probs(self) -> Tensor:
        if self.valid is None or self.valid.all():
            return self.probs
        return T.take_rows(self.probs, np.flatnonzero(self.valid))


@dataclass
class GatingUnit:
    """Linear gate ``x @ w + b`` over ``n_branches`` branches.

    Weights are stored input-major (``[d, N]``) so that rows of activations
    multiply them directly.  MoE units carry an extra ``noise`` matrix that
    only affects training.
    """

    w: Tensor
    b: Tensor
    mode: str = DMB
    k: int = 1
    noise: Tensor | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    gate_id: str = "gate"

    @classmethod
    def create(cls, d: int, n_branches: int, rng: np.random.Generator, mode: str = DMB,
               k: int = 1, gate_id: str = "gate") -> "GatingUnit":
        if n_branches < 1:
            raise GateConfigError("a gate needs at least one branch")
        if mode == MOE and not 1 <= k <= n_branches:
            raise GateConfigError(f"top-k must lie in [1, {n_branches}], got {k}")
        w = T.parameter(xavier_uniform(rng, d, n_branches), name=f"{gate_id}.w")
        b = T.parameter(np.zeros(n_branches), name=f"{gate_id}.b")
        noise = None
        if mode == MOE:
            noise = T.parameter(np.zeros((d, n_branches)), name=f"{gate_id}.noise")
        return cls(w, b, mode, k if mode == MOE else 1, noise,
                   np.random.default_rng(rng.integers(2**63)), gate_id)

    @property
    def n_branches(self) -> int:
        return self.w.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {"w": self.w, "b": self.b}
        if self.noise is not None:
            out["noise"] = self.noise
        return out

    def __call__(self, x: Tensor, training: bool = False) -> GateOutput:
        if self.mode == DMB:
            return gate_dmb(self, x)
        return gate_moe(self, x, training)


def gate_dmb(unit: GatingUnit, x: Tensor) -> GateOutput:
    if unit.mode != DMB:
        raise GateConfigError("gate_dmb called on an MoE unit")
    if T.is_grad_enabled():
        probs = T.softmax(T.add(T.matmul(x, unit.w, tag="gate"), unit.b), axis=-1)
    else:
        # same arithmetic as the graph path without autodiff bookkeeping (decode hot path)
        logits = T.matmul(x, unit.w, tag="gate").data + unit.b.data
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = T.Tensor(e / e.sum(axis=-1, keepdims=True))
    # np.argmax returns the first maximum: ties go to the lowest branch index.
    selection = np.argmax(probs.data, axis=-1)
    return GateOutput(probs, selection, DMB, gate_id=unit.gate_id)


def keep_top_k(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` largest entries per row and an additive -inf mask."""
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    mask = np.full(logits.shape, -np.inf, dtype=logits.dtype)
    np.put_along_axis(mask, order, 0.0, axis=-1)
    return order, mask


def gate_moe(unit: GatingUnit, x: Tensor, training: bool) -> GateOutput:
    if unit.mode != MOE:
        raise GateConfigError("gate_moe called on a DMB unit")
    if training and unit.k == 1:
        raise GateConfigError("top-1 MoE gating passes no gradient to the gate; use k >= 2")
    logits = T.add(T.matmul(x, unit.w, tag="gate"), unit.b)
    if training:
        std = T.softplus(T.matmul(x, unit.noise, tag="gate_noise"))
        eps = unit.rng.standard_normal(std.shape).astype(std.data.dtype)
        logits = T.add(logits, T.mul(std, T.Tensor(eps)))
    order, mask = keep_top_k(logits.data, unit.k)
    weights = T.softmax(T.add(logits, T.Tensor(mask)), axis=-1)
    return GateOutput(weights, order, MOE, gate_id=unit.gate_id)


def diversity_loss(probs: Tensor) -> Tensor:
    """Squared coefficient of variation of per-branch importance sums.

    ``mu`` is the mean importance over branches and ``sigma^2`` the *sum* of
    squared deviations (not divided by ``N``).
    """
    importance = T.sum(probs, axis=0)
    mu = T.mean(importance)
    dev = T.sub(importance, mu)
    sigma2 = T.sum(T.mul(dev, dev))
    return T.div(sigma2, T.mul(mu, mu))


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    ent = T.mul(probs, T.log(probs, floor=ENTROPY_FLOOR))
    return T.scale(T.sum(ent), -1.0 / probs.shape[0])


def pool(outputs: list[GateOutput]) -> Tensor:
    """Stack the valid rows of every invocation of one gating unit."""
    parts = [o.pooled_probs() for o in outputs]
    parts = [p for p in parts if p.shape[0]]
    if len(parts) == 1:
        return parts[0]
    return T.concat(parts, axis=0)
