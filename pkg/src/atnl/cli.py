"""Command-line interface: ``atnl {train,decode,check,dump-attention,avg}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime abort, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checks
from .attention import matched_aop_banks
from .checkpoint import average_checkpoints, load_checkpoint, parse_kv_block, save_checkpoint
from .data import TASKS, Vocabulary, batch_stream, disjoint_from, read_pairs, synth_task
from .decoding import beam_search, greedy_decode, token_accuracy
from .errors import AtnlError, CheckpointFormatError, ConfigError, LengthError
from .model import BOS, ModelConfig, Transformer, _parse, ffn_parameter_count
from .tensor import no_grad
from .training import TrainConfig, train_loop

log = logging.getLogger("atnl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run configuration

TASK_KEYS = {
    "preset": "str",
    "task": "str",
    "data_file": "str",
    "eval_file": "str",
    "src_min_len": "int",
    "src_max_len": "int",
    "train_pairs": "int",
    "eval_pairs": "int",
    "out_dir": "str",
    "eval_max_extra": "int",
}
MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: dict
    accepted: list[tuple[str, str]]


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_kv_block(text)
    except CheckpointFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_run_config(items: dict[str, str]) -> RunConfig:
    """Validate keys (unknown ones are rejected) and split them into configs."""
    unknown = sorted(set(items) - set(TASK_KEYS) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    task = {
        "task": "copy",
        "data_file": None,
        "eval_file": None,
        "src_min_len": 3,
        "src_max_len": 10,
        "train_pairs": 10000,
        "eval_pairs": 200,
        "out_dir": "runs/default",
        "eval_max_extra": 50,
    }
    for k in TASK_KEYS:
        if k in items and k != "preset":
            task[k] = _parse(items[k], TASK_KEYS[k])
    if task["task"] not in TASKS and not task["data_file"]:
        raise ConfigError(f"task must be one of {TASKS} unless data_file is given")

    model_kw = {k: _parse(v, MODEL_KEYS[k]) for k, v in items.items() if k in MODEL_KEYS and k != "aop_banks"}
    base = ModelConfig.preset(items.get("preset", "base"))
    if "d_model" in model_kw or "heads" in model_kw:
        per_head = model_kw.get("d_model", base.d_model) // max(1, model_kw.get("heads", base.heads))
        model_kw.setdefault("d_k", per_head)
        model_kw.setdefault("d_v", per_head)
    cfg = replace(base, **model_kw)
    if "aop_banks" in items:
        if items["aop_banks"].strip() == "match":
            n_p = matched_aop_banks(
                ffn_parameter_count(cfg.d_model, cfg.d_ff), cfg.aop_heads, cfg.aop_d_k, cfg.aop_d_v, cfg.d_model
            )
        else:
            n_p = _parse(items["aop_banks"], "int")
        cfg = replace(cfg, aop_banks=n_p)
    train = TrainConfig(**{k: _parse(v, TRAIN_KEYS[k]) for k, v in items.items() if k in TRAIN_KEYS})
    accepted = [(k, items[k]) for k in sorted(items)]
    return RunConfig(cfg, train, task, accepted)


def load_run_config(path, overrides: dict[str, str]) -> RunConfig:
    items = read_config_file(path) if path else {}
    items.update(overrides)
    return build_run_config(items)


def task_data(rc: RunConfig):
    """(train pairs, held-out pairs, vocabulary) for a run."""
    t, seed = rc.task, rc.train.seed
    if t["data_file"]:
        train, vocab = read_pairs(t["data_file"])
        held = read_pairs(t["eval_file"], vocab)[0] if t["eval_file"] else []
        if len(vocab) > rc.model.vocab_size:
            raise ConfigError(f"data needs vocab_size >= {len(vocab)}")
        return train, held, vocab
    vocab = Vocabulary.synthetic(rc.model.vocab_size)
    lens = (t["src_min_len"], t["src_max_len"])
    train = synth_task(t["task"], rc.model.vocab_size, lens, t["train_pairs"], seed, rc.model.max_len)
    held = synth_task(t["task"], rc.model.vocab_size, lens, t["eval_pairs"], seed + 1, rc.model.max_len)
    held = disjoint_from(held, train)
    return train, held, vocab


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["out_dir"] = args.out
    rc = load_run_config(args.config, overrides)
    out = Path(rc.task["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.log", "w", encoding="utf-8") as fh:
        for k, v in rc.accepted:
            fh.write(f"{k} = {v}\n")
            log.info("config %s = %s", k, v)
    train, held, vocab = task_data(rc)
    model = Transformer(rc.model, seed=rc.train.seed, symbols=vocab.symbols)
    log.info("model has %d parameters", model.parameter_count())
    result = train_loop(
        model,
        batch_stream(train, rc.train.token_budget, rc.train.seed),
        rc.train,
        out_dir=out,
        metrics_path=out / "metrics.tsv",
    )
    print(f"wrote {len(result.checkpoints)} checkpoint(s) to {out}")
    if held and rc.train.total_steps > 0:
        acc = token_accuracy(model, held, rc.task["eval_max_extra"])
        print(f"held-out token accuracy: {acc:.4f}")
        with open(out / "run.log", "a", encoding="utf-8") as fh:
            fh.write(f"# held-out token accuracy {acc!r}\n")
    return EXIT_OK


def _load_models(paths) -> Transformer:
    return load_checkpoint(paths[0]) if len(paths) == 1 else average_checkpoints(paths)


def _vocab_for(model: Transformer) -> Vocabulary:
    if model.symbols is None:
        return Vocabulary.synthetic(model.config.vocab_size)
    return Vocabulary(model.symbols)


def cmd_decode(args) -> int:
    model = _load_models(args.checkpoints)
    vocab = _vocab_for(model)
    try:
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read input {args.input}: {exc.strerror}") from None
    outputs = []
    for line in lines:
        src = vocab.encode(line.split("\t", 1)[0].split())
        if args.beam == 1:
            ids = greedy_decode(model, src, args.max_extra)
        else:
            ids = beam_search(model, src, args.beam, args.alpha, args.max_extra)[0]
        outputs.append(" ".join(vocab.decode(ids)))
    text = "".join(o + "\n" for o in outputs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args) -> int:
    suites = list(checks.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in suites:
        if name == "grad":
            results = checks.grad_suite(seeds=args.seeds)
        elif name == "variance":
            dks = (args.dk,) if args.dk else (16, 64, 256)
            results = checks.variance_suite(dks, args.samples, args.seed or 0)
        elif name == "mask":
            results = checks.mask_suite(args.seed or 0)
        else:
            results = checks.pe_suite()
        print(f"[{name}]")
        for r in results:
            print(r.line())
            ok &= r.passed
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def format_attention_dump(entries) -> str:
    """Blocks of ``layer=i head=j kind=k``, token lines, then weight rows (6 significant digits)."""
    blocks = []
    for kind, layer, head, tq, tk, w in entries:
        lines = [f"layer={layer} head={head} kind={kind}", "tokens_q: " + " ".join(tq), "tokens_k: " + " ".join(tk)]
        lines += [" ".join(f"{x:.6g}" for x in row) for row in w]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def attention_dump(model: Transformer, symbols: list[str], beam: int = 1, alpha: float = 0.6, max_extra: int = 50):
    """Decode ``symbols`` then collect every attention matrix of the teacher-forced pass.

    The decoder side is fed the BOS-shifted output, so row ``i`` of each
    decoder matrix is the query that predicted output token ``i``.
    """
    vocab = _vocab_for(model)
    src = vocab.encode(symbols)
    if len(src) > model.config.max_len:
        raise LengthError(f"input has {len(src)} tokens; model max_len is {model.config.max_len}")
    out = greedy_decode(model, src, max_extra) if beam == 1 else beam_search(model, src, beam, alpha, max_extra)[0]
    dec_in = [BOS] + out[:-1] if out else [BOS]
    log_: list = []
    with no_grad():
        model.forward(np.asarray([src]), np.asarray([dec_in]), attn_log=log_)
    src_tok = [vocab.token(i) for i in src]
    dec_tok = [vocab.token(i) for i in dec_in]
    entries = []
    for kind, layer, w in log_:
        if kind not in ("enc_self", "dec_self", "cross"):
            continue
        tq = src_tok if kind == "enc_self" else dec_tok
        tk = dec_tok if kind == "dec_self" else src_tok
        for head in range(w.shape[1]):
            entries.append((kind, layer, head, tq, tk, w[0, head]))
    return entries


def cmd_dump_attention(args) -> int:
    model = load_checkpoint(args.checkpoint)
    entries = attention_dump(model, args.input.split(), args.beam, args.alpha, args.max_extra)
    text = format_attention_dump(entries)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_avg(args) -> int:
    model = average_checkpoints(args.checkpoints)
    save_checkpoint(args.out, model)
    print(f"averaged {len(args.checkpoints)} checkpoint(s) into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atnl", description="Desk-scale Transformer laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def decoding_flags(sp, beam_default):
        sp.add_argument("--beam", type=int, default=beam_default)
        sp.add_argument("--alpha", type=float, default=0.6)
        sp.add_argument("--max-extra", type=int, default=50)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=False)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode one line per input line")
    d.add_argument("checkpoints", nargs="+", help="several paths are averaged first")
    d.add_argument("--input", required=True)
    d.add_argument("--out")
    decoding_flags(d, 4)
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("check", help="run an invariant suite")
    c.add_argument("suite", choices=[*checks.SUITES, "all"])
    c.add_argument("--dk", type=int)
    c.add_argument("--samples", type=int, default=10000)
    c.add_argument("--seed", type=int)
    c.add_argument("--seeds", type=int, default=20, help="number of seeds for the grad suite")
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("dump-attention", help="write every attention matrix for one input")
    a.add_argument("checkpoint")
    a.add_argument("--input", required=True, help="space-separated source symbols")
    a.add_argument("--out")
    decoding_flags(a, 1)
    a.set_defaults(func=cmd_dump_attention)

    v = sub.add_parser("avg", help="average checkpoints into one file")
    v.add_argument("checkpoints", nargs="+")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_avg)
    return p


def main(argv=None) -> int:
    level = os.environ.get("ATNL_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"atnl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AtnlError, OSError) as exc:
        print(f"atnl: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
