"""Greedy and beam-search decoding, and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import BOS, EOS, TransformerModel


@dataclass
class Decoded:
    tokens: list[int]
    truncated: bool
    logprob: float = 0.0


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class IncrementalDecoder:
    """Cached decoder over ``batch`` rows sharing one encoded source.

    Implements the scorer protocol used by the search functions:
    ``step(tokens) -> [rows, V]`` log-probabilities and ``select(rows)``.
    """

    def __init__(self, model: TransformerModel, src: Sequence[int]):
        self.model = model
        with T.no_grad():
            self.enc = model.encode(np.asarray(src, dtype=np.int64)[None, :])
        self.batch = 1
        self.state = model.start_state()
        self.pos = 0

    def step(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(self.batch, 1)
        with T.no_grad():
            h, _ = self.model.decode(self.enc, ids, state=self.state, offset=self.pos)
            logits = self.model.project(h).data
        self.pos += 1
        return _log_softmax(logits)

    def select(self, rows: Sequence[int]) -> None:
        """Keep (and reorder) the given rows of the decoding state."""
        rows = np.asarray(rows, dtype=np.int64)
        if self.batch == 1 and rows.size == 1 and rows[0] == 0:
            return
        d = self.model.cfg.d
        old = self.batch

        def pick(t):
            return T.Tensor(t.data.reshape(old, -1, d)[rows].reshape(-1, d))

        for layer_state in self.state:
            for cache in layer_state.values():
                for key in ("k", "v", "static_k", "static_v"):
                    if key in cache:
                        cache[key] = pick(cache[key])
        self.enc.memory = pick(self.enc.memory)
        self.enc.valid = self.enc.valid[rows]
        self.enc.batch = self.batch = rows.size


def _forbid_eos(lp: np.ndarray, emitted: int, min_len: int) -> np.ndarray:
    if emitted < min_len:
        lp = lp.copy()
        lp[..., EOS] = -np.inf
    return lp


def greedy_search(scorer, max_len: int, min_len: int = 0) -> Decoded:
    """``min_len`` suppresses EOS until that many tokens have been emitted."""
    out: list[int] = []
    total = 0.0
    token = BOS
    for t in range(max_len):
        lp = _forbid_eos(scorer.step([token])[0], t, min_len)
        token = int(np.argmax(lp))
        total += float(lp[token])
        if token == EOS:
            return Decoded(out, False, total)
        out.append(token)
    return Decoded(out, True, total)


def greedy_decode(model: TransformerModel, src: Sequence[int], max_len: int = 64) -> Decoded:
    """Argmax decoding; stops at EOS (not included) or after ``max_len`` tokens."""
    return greedy_search(IncrementalDecoder(model, src), min(max_len, model.cfg.max_len))


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def beam_search(scorer, beam: int, lp_alpha: float, max_len: int, min_len: int = 0) -> Decoded:
    """Beam search ranking finished hypotheses by ``logP / ((5+len)/6)^lp_alpha``.

    ``len`` counts emitted tokens including EOS.  Each step keeps the best
    ``beam`` continuations; those ending in EOS retire to the finished pool.
    The search stops when no live hypothesis can still overtake the best
    finished one, or at ``max_len``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [BeamHypothesis([], 0.0)]
    last = [BOS]
    finished: list[tuple[float, BeamHypothesis]] = []
    for t in range(max_len):
        lp = _forbid_eos(scorer.step(last), t, min_len)
        cand = []
        for r, hyp in enumerate(live):
            for tok in np.argsort(-lp[r], kind="stable")[:beam]:
                cand.append((hyp.logprob + float(lp[r, tok]), r, int(tok)))
        cand.sort(key=lambda c: -c[0])
        new_live, rows = [], []
        for score, r, tok in cand[:beam]:
            tokens = live[r].tokens + [tok]
            if tok == EOS:
                hyp = BeamHypothesis(tokens[:-1], score, True)
                finished.append((score / length_penalty(len(tokens), lp_alpha), hyp))
            else:
                new_live.append(BeamHypothesis(tokens, score))
                rows.append(r)
        if not new_live:
            break
        if finished:
            best = max(f[0] for f in finished)
            # Scores only fall as tokens are appended, so the most hopeful
            # normalization for a live hypothesis is the longest one allowed.
            bound = max(h.logprob for h in new_live)
            bound /= max(length_penalty(max_len + 1, lp_alpha), 1.0)
            if bound <= best:
                break
        live = new_live
        scorer.select(rows)
        last = [h.tokens[-1] for h in live]
    if finished:
        _, hyp = max(finished, key=lambda f: f[0])
        return Decoded(hyp.tokens, False, hyp.logprob)
    best = max(live, key=lambda h: h.logprob)
    return Decoded(best.tokens, True, best.logprob)


def beam_decode(model: TransformerModel, src: Sequence[int], beam: int = 4,
                lp_alpha: float = 0.6, max_len: int = 64) -> Decoded:
    if beam < 1:
        raise ValueError("beam must be >= 1")
    return beam_search(IncrementalDecoder(model, src), beam, lp_alpha,
                       min(max_len, model.cfg.max_len))


# ---------------------------------------------------------------------- BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = 4) -> BleuReport:
    """Corpus BLEU (0-100) over token lists, one reference per candidate.

    Orders ``n >= 2`` with zero matches are add-one smoothed so that short
    segments do not zero the geometric mean; a zero unigram match still
    yields 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in number")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        hyp_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    precisions = []
    for n in range(max_n):
        if n == 0 or matches[n] > 0:
            precisions.append(matches[n] / totals[n] if totals[n] else 0.0)
        else:
            precisions.append((matches[n] + 1) / (totals[n] + 1))
    if hyp_len == 0 or precisions[0] == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(100 * score, precisions, bp, hyp_len, ref_len)
