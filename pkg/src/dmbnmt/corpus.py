"""Toy tasks, TSV corpora, vocabularies and token-budget batching."""

from __future__ import annotations

import queue
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import BOS, EOS, PAD, RESERVED, UNK

TASKS = ("copy", "reverse", "sort")
BUCKET_WIDTH = 4

Pair = tuple[list[str], list[str]]


class CorpusError(ValueError):
    """Malformed corpus input; the message names the offending line."""


def tokenize(line: str) -> list[str]:
    return line.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def gen_toy(task: str, vocab_size: int, len_range: tuple[int, int], count: int,
            seed: int) -> list[Pair]:
    """Random source sequences over ``vocab_size - 4`` symbols and their transforms.

    Symbols are the decimal strings ``"4"`` .. ``str(vocab_size - 1)``; see
    :func:`toy_vocab` for the matching vocabulary.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {len_range}")
    if vocab_size <= len(RESERVED):
        raise ValueError("vocab_size must exceed the reserved ids")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        ids = rng.integers(len(RESERVED), vocab_size, size=n)
        src = [str(i) for i in ids]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = [str(i) for i in sorted(ids)]
        pairs.append((src, tgt))
    return pairs


def ingest_tsv(path) -> list[Pair]:
    pairs, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.count("\t") != 1:
                errors.append(f"line {lineno}: expected exactly one tab, found {line.count(chr(9))}")
                continue
            src, tgt = line.split("\t")
            if not src.strip() or not tgt.strip():
                errors.append(f"line {lineno}: empty side")
                continue
            pairs.append((tokenize(src), tokenize(tgt)))
    if errors:
        raise CorpusError("; ".join(errors))
    return pairs


def write_tsv(pairs: Iterable[Pair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(f"{detokenize(s)}\t{detokenize(t)}\n")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        """``tokens`` are the non-reserved entries in id order (ids start at 4)."""
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.itos[len(RESERVED):]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def toy_vocab(vocab_size: int) -> Vocabulary:
    """Vocabulary in which toy symbol ``"i"`` has id ``i``."""
    return Vocabulary([str(i) for i in range(len(RESERVED), vocab_size)])


def build_vocab(pairs: Iterable[Pair], max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    counts = Counter()
    for s, t in pairs:
        counts.update(s)
        counts.update(t)
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = [t for t, _ in ranked]
    if max_size is not None:
        tokens = tokens[: max(max_size - len(RESERVED), 0)]
    return Vocabulary(tokens)


@dataclass
class Batch:
    src: np.ndarray        # [B, S]
    src_mask: np.ndarray   # [B, S] true on real tokens
    tgt_in: np.ndarray     # [B, T] BOS + target
    tgt_out: np.ndarray    # [B, T] target + EOS
    tgt_mask: np.ndarray   # [B, T]
    index: np.ndarray      # positions of the pairs in the input list

    @property
    def src_tokens(self) -> int:
        return int(self.src_mask.sum())

    @property
    def tgt_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def collate(encoded: Sequence[tuple[list[int], list[int]]], index=None) -> Batch:
    b = len(encoded)
    s_len = max(len(s) for s, _ in encoded)
    t_len = max(len(t) for _, t in encoded) + 1
    src = np.full((b, s_len), PAD, dtype=np.int64)
    tgt_in = np.full((b, t_len), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_len), PAD, dtype=np.int64)
    for r, (s, t) in enumerate(encoded):
        src[r, : len(s)] = s
        tgt_in[r, : len(t) + 1] = [BOS] + list(t)
        tgt_out[r, : len(t) + 1] = list(t) + [EOS]
    idx = np.arange(b) if index is None else np.asarray(index)
    return Batch(src, src != PAD, tgt_in, tgt_out, tgt_out != PAD, idx)


def make_batches(pairs: Sequence[Pair], vocab: Vocabulary, tokens_per_batch: int,
                 seed: int, epochs: int | None = 1) -> Iterator[Batch]:
    """Length-bucketed batches whose padded source and target sizes fit the budget.

    Pairs are bucketed by ``max(len(src), len(tgt)+1) // 4``; buckets are
    chunked to the token budget and the chunks are shuffled per epoch.
    ``epochs=None`` repeats forever.
    """
    encoded = [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(encoded))
        buckets: dict[int, list[int]] = {}
        for i in order:
            s, t = encoded[i]
            buckets.setdefault(max(len(s), len(t) + 1) // BUCKET_WIDTH, []).append(int(i))
        chunks = []
        for key in sorted(buckets):
            cur, width = [], 0
            for i in buckets[key]:
                s, t = encoded[i]
                w = max(width, len(s), len(t) + 1)
                if cur and w * (len(cur) + 1) > tokens_per_batch:
                    chunks.append(cur)
                    cur, w = [], max(len(s), len(t) + 1)
                cur.append(i)
                width = w
            if cur:
                chunks.append(cur)
        for c in rng.permutation(len(chunks)):
            ids = chunks[c]
            yield collate([encoded[i] for i in ids], ids)
        epoch += 1


def prefetch(batches: Iterator[Batch], depth: int = 4) -> Iterator[Batch]:
    """Produce batches on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for b in batches:
                q.put(b)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item
