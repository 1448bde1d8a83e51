"""Command-line entry point: ``dmbnmt {train,translate,eval,profile,bench,gates}``.

Configuration is resolved in three layers: the preset, then an optional
key-value file with ``[model]``, ``[train]``, ``[data]`` and ``[run]``
sections, then command-line flags.  The resolved configuration is echoed
to stderr (and to ``config.txt`` in the output directory) before a command
runs, in the same file format so it can be fed back with ``--config``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import fnmatch
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import costs
from . import tensor as T
from .corpus import (TASKS, CorpusError, Vocabulary, build_vocab, gen_toy, ingest_tsv,
                     make_batches, prefetch, tokenize, toy_vocab)
from .gating import DMB, GateConfigError
from .inference import beam_decode, bleu, greedy_decode
from .layers import VARIANTS
from .model import BOS, PRESETS, ModelConfig, TransformerModel, preset
from .trainer import NumericError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("dmbnmt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------- configuration


@dataclass
class DataConfig:
    task: str = "copy"
    train: str = ""
    vocab_size: int = 30
    max_vocab: int = 0
    min_len: int = 3
    max_len: int = 12
    pairs: int = 10000


@dataclass
class RunConfig:
    preset: str = "micro"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 1
    out: str = ""

    def to_text(self) -> str:
        lines = ["[run]", f"preset = {self.preset}", f"seed = {self.seed}", f"out = {self.out}"]
        for section, obj, skip in (("model", self.model, ()),
                                   ("train", self.train, ("seed", "out_dir")),
                                   ("data", self.data, ())):
            lines += ["", f"[{section}]"]
            for f in dataclasses.fields(obj):
                if f.name not in skip:
                    v = getattr(obj, f.name)
                    lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(cls, name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise UsageError(f"unknown key {name!r}")
    default = fields[name].default
    if default is dataclasses.MISSING and fields[name].default_factory is not dataclasses.MISSING:
        default = fields[name].default_factory()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw) if raw != "" else None
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {name}") from None
    return raw


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out = {s: dict(parser[s]) for s in parser.sections()}
    unknown = set(out) - {"model", "train", "data", "run"}
    if unknown:
        raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    return out


def resolve_config(args: argparse.Namespace, default_preset: str = "micro") -> RunConfig:
    sections = read_config_file(args.config) if getattr(args, "config", None) else {}
    run = dict(sections.get("run", {}))
    for key in run:
        if key not in ("preset", "seed", "out"):
            raise UsageError(f"[run]: unknown key {key!r}")
    name = getattr(args, "preset", None) or run.get("preset") or default_preset
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}")

    model_kv = {}
    for k, raw in sections.get("model", {}).items():
        try:
            model_kv[k] = _coerce(ModelConfig, k, raw)
        except UsageError as exc:
            raise UsageError(f"[model]: {exc}") from None
    flag_map = {"variant": "variant", "branches": "n_branches", "topk": "k", "alpha": "alpha"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            model_kv[key] = v
    try:
        model = preset(name, **model_kv)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None

    train_kv = {}
    for k, raw in sections.get("train", {}).items():
        if k in ("seed", "out_dir"):
            raise UsageError(f"[train]: {k!r} belongs in [run]")
        try:
            train_kv[k] = _coerce(TrainConfig, k, raw)
        except UsageError as exc:
            raise UsageError(f"[train]: {exc}") from None
    if getattr(args, "steps", None) is not None:
        train_kv["steps"] = args.steps

    data_kv = {}
    for k, raw in sections.get("data", {}).items():
        try:
            data_kv[k] = _coerce(DataConfig, k, raw)
        except UsageError as exc:
            raise UsageError(f"[data]: {exc}") from None
    data = DataConfig(**data_kv)
    if data.task not in TASKS:
        raise UsageError(f"[data]: task must be one of {TASKS}")

    seed = getattr(args, "seed", None)
    seed = int(run.get("seed", 1)) if seed is None else seed
    out = getattr(args, "out", None) or run.get("out", "")
    try:
        tcfg = TrainConfig(**train_kv, seed=seed, out_dir=out or None)
    except ValueError as exc:
        raise UsageError(f"[train]: {exc}") from None
    return RunConfig(name, model, tcfg, data, seed, out)


def _echo(text: str, out: str | None = None) -> None:
    for line in text.rstrip("\n").splitlines():
        print(f"# {line}", file=sys.stderr)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.txt").write_text(text, encoding="utf-8")


def _echo_args(args: argparse.Namespace, extra: dict | None = None) -> None:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    items.update(extra or {})
    _echo("\n".join(f"{k} = {'' if v is None else v}" for k, v in sorted(items.items())))


# ---------------------------------------------------------------------- helpers


def _load(path: str) -> TransformerModel:
    try:
        return ckpt_io.load_model(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def _load_vocab(args, model: TransformerModel) -> Vocabulary:
    path = args.vocab or str(Path(args.checkpoint).parent / "vocab.txt")
    if Path(path).exists():
        vocab = Vocabulary.load(path)
    elif not args.vocab:
        vocab = toy_vocab(model.cfg.vocab_size)
    else:
        raise DataError(f"vocabulary {path} not found")
    if len(vocab) != model.cfg.vocab_size:
        raise DataError(f"vocabulary has {len(vocab)} entries, model expects "
                        f"{model.cfg.vocab_size}")
    return vocab


def _read_lines(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _translate_all(model, vocab, sources: Sequence[list[str]], mode: str, beam: int,
                   lp: float, max_len: int, workers: int) -> list[list[str]]:
    def one(tokens):
        ids = vocab.encode(tokens)
        if mode == "greedy":
            out = greedy_decode(model, ids, max_len)
        else:
            out = beam_decode(model, ids, beam, lp, max_len)
        return vocab.decode(out.tokens)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, sources))
    return [one(s) for s in sources]


def _training_pairs(data: DataConfig, seed: int):
    if data.train:
        pairs = ingest_tsv(data.train)
        return pairs, build_vocab(pairs, data.max_vocab or None)
    pairs = gen_toy(data.task, data.vocab_size, (data.min_len, data.max_len), data.pairs, seed)
    return pairs, toy_vocab(data.vocab_size)


# ---------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = resolve_config(args)
    if not rc.out:
        raise UsageError("train needs --out (or [run] out = ...)")
    pairs, vocab = _training_pairs(rc.data, rc.seed)
    rc.model = rc.model.replace(vocab_size=len(vocab))
    if rc.model.max_len < rc.data.max_len + 1:
        rc.model = rc.model.replace(max_len=2 * (rc.data.max_len + 1))
    _echo(rc.to_text(), rc.out)
    out = Path(rc.out)
    vocab.save(out / "vocab.txt")
    model = TransformerModel(rc.model, seed=rc.seed)
    batches = prefetch(make_batches(pairs, vocab, rc.train.tokens_per_batch, rc.seed, epochs=None))
    result = train(model, batches, rc.train)
    final = result.averaged
    if final is None:
        final = str(out / "averaged.bin")
        ckpt_io.save_model(model, final, {"step": rc.train.steps})
    print(f"averaged checkpoint: {final}")
    if rc.model.variant == DMB:
        folded = ckpt_io.to_model(ckpt_io.read(final)).fold()
        ckpt_io.save_model(folded, out / "folded.bin")
        print(f"folded checkpoint: {out / 'folded.bin'}")
    last = result.log[-1]
    print(f"final step {last.step}: lm {last.lm:.4f} ld {last.ld:.4f} le {last.le:.4f} "
          f"util {np.round(last.util, 3).tolist()}")
    return EXIT_OK


def cmd_translate(args) -> int:
    _echo_args(args)
    model = _load(args.checkpoint)
    vocab = _load_vocab(args, model)
    sources = [tokenize(line.split("\t")[0]) for line in _read_lines(args.input)]
    outs = _translate_all(model, vocab, sources, args.mode, args.beam, args.length_penalty,
                          args.max_len, args.workers)
    text = "".join(" ".join(o) + "\n" for o in outs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo_args(args)
    if args.data:
        try:
            pairs = ingest_tsv(args.data)
        except CorpusError as exc:
            raise DataError(str(exc)) from None
        sources, refs = [s for s, _ in pairs], [t for _, t in pairs]
    elif args.ref:
        refs = [tokenize(x) for x in _read_lines(args.ref)]
        sources = [tokenize(x) for x in _read_lines(args.src)] if args.src else None
    else:
        raise UsageError("eval needs --data, or --ref with --src or --hyp")
    if args.hyp:
        hyps = [tokenize(x) for x in _read_lines(args.hyp)]
    elif args.checkpoint and sources is not None:
        model = _load(args.checkpoint)
        vocab = _load_vocab(args, model)
        hyps = _translate_all(model, vocab, sources, args.mode, args.beam, args.length_penalty,
                              args.max_len, args.workers)
    else:
        raise UsageError("eval needs --hyp, or --checkpoint with sources")
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses for {len(refs)} references")
    rep = bleu(hyps, refs)
    print(f"BLEU = {rep.score:.2f}  precisions = "
          + "/".join(f"{100 * p:.1f}" for p in rep.precisions)
          + f"  BP = {rep.brevity_penalty:.4f}  hyp_len = {rep.hyp_len}  ref_len = {rep.ref_len}")
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.checkpoint:
        cfg = ckpt_io.read(args.checkpoint).config
        _echo_args(args, {"model." + k: v for k, v in cfg.to_dict().items()})
    else:
        rc = resolve_config(args, default_preset="tiny")
        cfg = rc.model
        _echo(rc.to_text())
    rep = costs.profile(cfg, args.S, args.T, args.bleu)
    print(rep.to_text())
    if args.out:
        Path(args.out).write_text(rep.to_kv(), encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = _load(args.checkpoint)
        _echo_args(args)
    else:
        rc = resolve_config(args, default_preset="tiny")
        _echo(rc.to_text())
        model = TransformerModel(rc.model, seed=rc.seed)
        if model.cfg.variant == DMB:
            model.fold()
    stats = costs.bench_latency(model, args.seq_len, args.mode, args.trials, args.warmup,
                                args.beam, args.length_penalty, seed=args.seed or 0)
    print(f"median {stats['median'] * 1e3:.3f} ms  iqr {stats['iqr'] * 1e3:.3f} ms  "
          f"trials {len(stats['samples'])}")
    return EXIT_OK


def gate_rows(model: TransformerModel, vocab: Vocabulary, pairs, layer: str = "*",
              max_len: int = 64):
    """Per-position routing rows ``(sentence_id, position, token, gate_id, branch, prob)``.

    Every gate invocation is exported; ``gate_id`` carries the routed input's
    role as a suffix (``/in``, ``/kv``, ``/out``).  Sentences without a
    target are completed by greedy decoding first.
    """
    if not model.cfg.gated_sublayers():
        raise DataError("model has no gates (plain variant)")
    rows = []
    for sid, (src, tgt) in enumerate(pairs):
        src_ids = np.asarray(vocab.encode(src), dtype=np.int64)
        tgt_ids = (vocab.encode(tgt) if tgt is not None
                   else greedy_decode(model, src_ids, max_len).tokens)
        tgt_in = np.asarray([BOS] + list(tgt_ids), dtype=np.int64)
        with T.no_grad():
            _, records = model.forward(src_ids[None, :], tgt_in[None, :])
        for rec in records:
            gid = f"{rec.gate_id}/{rec.role}"
            if not fnmatch.fnmatch(gid, layer) and not fnmatch.fnmatch(rec.gate_id, layer):
                continue
            on_source = rec.gate_id.startswith("enc.") or rec.role in ("kv", "k", "v")
            ids = src_ids if on_source else tgt_in
            branch = rec.branch_of_rows()
            probs = rec.probs.data
            for pos in range(len(ids)):
                b = int(branch[pos])
                rows.append((sid, pos, vocab.itos[ids[pos]], gid, b, float(probs[pos, b])))
    return rows


def cmd_gates(args) -> int:
    _echo_args(args)
    model = _load(args.checkpoint)
    vocab = _load_vocab(args, model)
    pairs = []
    for line in _read_lines(args.input):
        if not line.strip():
            continue
        parts = line.split("\t")
        pairs.append((tokenize(parts[0]), tokenize(parts[1]) if len(parts) > 1 else None))
    rows = gate_rows(model, vocab, pairs, args.layer, args.max_len)
    text = "sentence_id\tposition\ttoken\tgate_id\tbranch\tprob\n" + "".join(
        f"{s}\t{p}\t{tok}\t{g}\t{b}\t{pr:.6f}\n" for s, p, tok, g, b, pr in rows)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value config file with [model]/[train]/[data]/[run]")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--branches", type=int, help="branches (or experts) per layer")
    p.add_argument("--topk", type=int, help="experts mixed per position (moe)")
    p.add_argument("--alpha", type=float, help="auxiliary-loss weight")
    p.add_argument("--seed", type=int)


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the checkpoint)")
    p.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--length-penalty", type=float, default=0.6)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmbnmt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a toy task or TSV corpus")
    _model_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one sentence per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    _decode_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="corpus BLEU of translations against references")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="TSV of source<TAB>reference")
    p.add_argument("--src")
    p.add_argument("--ref")
    p.add_argument("--hyp", help="score existing hypotheses instead of decoding")
    _decode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter and Mult-Adds report")
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("-S", "--src-len", dest="S", type=int, default=30)
    p.add_argument("-T", "--tgt-len", dest="T", type=int, default=30)
    p.add_argument("--bleu", type=float)
    p.add_argument("--out", help="write a key=value report here")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="single-thread decoding latency")
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seq-len", type=int, default=30)
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--length-penalty", type=float, default=0.6)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gates", help="export per-token branch assignments as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source lines, optionally source<TAB>target")
    p.add_argument("--layer", default="*", help="glob over gate ids, e.g. 'enc.*.ffn'")
    p.add_argument("--output")
    p.add_argument("--vocab")
    p.add_argument("--max-len", type=int, default=64)
    p.set_defaults(func=cmd_gates)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dmbnmt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dmbnmt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, ckpt_io.CheckpointError, GateConfigError, IndexError,
            OSError, ValueError) as exc:
        print(f"dmbnmt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
