"""Command-line interface: ``python -m maligan <command>`` or the ``maligan`` script.

Exit codes: 0 success, 1 usage or input error, 2 divergence guard tripped,
3 oracle check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checks import oracle_suite
from .config import ConfigError, corpus_from_config, load_config, load_distribution, save_corpus
from .data import Corpus, synth_grammar, synth_grid
from .models import make_generator
from .training import OUTPUT_DIR_ENV, DivergenceError, evaluate, run

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_ORACLE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _json(obj) -> str:
    return json.dumps({k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                       for k, v in obj.items()}, indent=2, sort_keys=True)


def cmd_train(args) -> int:
    config = load_config(args.config, _overrides(args.set))
    out = Path(args.output or os.environ.get(OUTPUT_DIR_ENV) or "runs/latest")
    corpus, pd = corpus_from_config(config)
    if corpus.max_len != config.max_len:
        raise ConfigError(f"max_len = {config.max_len} but the corpus has length {corpus.max_len}")
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(out / "corpus", corpus, pd)
    (out / "config.cfg").write_text(Path(args.config).read_text()
                                    + "".join(f"{k} = {v}\n" for k, v in _overrides(args.set).items()))
    try:
        report = run(config, corpus, pd, output_dir=out)
    except DivergenceError as exc:
        print(f"divergence guard tripped: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(_json(report.final))
    print(f"wrote {out / 'run_report.json'}")
    return EXIT_OK


def _load_generator(path):
    params, meta = ad.load_checkpoint(path)
    return make_generator(meta, params)


def cmd_eval(args) -> int:
    gen = _load_generator(args.checkpoint)
    corpus = Corpus.load(args.corpus)
    pd = load_distribution(args.corpus, corpus)
    print(_json(evaluate(gen, corpus, pd, args.bleu_samples, args.seed)))
    return EXIT_OK


def cmd_sample(args) -> int:
    gen = _load_generator(args.checkpoint)
    corpus = Corpus.load(args.corpus) if args.corpus else None
    batch = gen.sample(args.n, np.random.default_rng(args.seed))
    for seq in batch.to_lists():
        if corpus is not None:
            print(corpus.format_sequence(seq))
        else:
            print(" ".join(str(t) for t in seq))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    results = oracle_suite(args.seed, args.instances)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "grammar":
        pd, corpus = synth_grammar(args.vocab_size, args.max_len, args.seed, args.concentration,
                                   args.n_samples, None if args.order < 0 else args.order)
        save_corpus(out, corpus, pd)
    else:
        corpus, _ = synth_grid(args.side, args.patterns, args.noise, args.seed, args.n_samples)
        save_corpus(out, corpus)
    print(f"wrote {sum(len(b) for b in corpus.splits.values())} sequences to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maligan", description="Importance-weighted adversarial training for discrete sequences.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--output", help=f"output directory (default ${OUTPUT_DIR_ENV} or runs/latest)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a generator checkpoint on a saved corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--bleu-samples", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="print samples from a generator checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus", help="saved corpus used to format tokens")
    s.set_defaults(fn=cmd_sample)

    o = sub.add_parser("oracle-check", help="run the exact-oracle suite")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--instances", type=int, default=100)
    o.set_defaults(fn=cmd_oracle_check)

    y = sub.add_parser("synth", help="write a synthetic corpus to disk")
    y.add_argument("kind", choices=("grammar", "grid"))
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--n-samples", type=int, default=10000)
    y.add_argument("--vocab-size", type=int, default=4)
    y.add_argument("--max-len", type=int, default=6)
    y.add_argument("--concentration", type=float, default=1.0)
    y.add_argument("--order", type=int, default=-1)
    y.add_argument("--side", type=int, default=3)
    y.add_argument("--patterns", type=int, default=4)
    y.add_argument("--noise", type=float, default=0.1)
    y.set_defaults(fn=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
