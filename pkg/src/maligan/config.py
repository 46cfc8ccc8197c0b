"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored.  Keys are ``TrainConfig`` field
names; values are parsed according to the field's type.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Corpus, load_text_corpus, synth_grammar, synth_grid
from .oracle import ExactDistribution
from .training import TrainConfig

DISTRIBUTION_FILE = "data_distribution.npy"


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    types = TrainConfig.field_types()
    values: dict[str, object] = {}
    items: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        items.append((key, raw))
    items += list((overrides or {}).items())
    for key, raw in items:
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), overrides)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def corpus_from_config(config: TrainConfig) -> tuple[Corpus, ExactDistribution | None]:
    """Build (or load) the corpus a config describes; the exact data law comes along when known.

    A non-empty ``corpus_dir`` wins: a directory holding ``corpus.json`` is
    loaded as saved, anything else is read as a raw text corpus.
    """
    if config.corpus_dir:
        d = Path(config.corpus_dir)
        if (d / "corpus.json").exists():
            corpus = Corpus.load(d)
            return corpus, load_distribution(d, corpus)
        return load_text_corpus(d, config.max_len), None
    if config.task == "grammar":
        order = None if config.grammar_order < 0 else config.grammar_order
        pd, corpus = synth_grammar(config.vocab_size, config.max_len, config.seed, config.concentration,
                                   config.n_samples, order)
        return corpus, pd
    if config.task == "grid":
        corpus, _ = synth_grid(config.grid_side, config.grid_patterns, config.grid_noise, config.seed,
                               config.n_samples)
        return corpus, None
    raise ConfigError(f"task {config.task!r} needs corpus_dir")


def save_corpus(directory, corpus: Corpus, pd: ExactDistribution | None = None) -> None:
    corpus.save(directory)
    if pd is not None:
        np.save(Path(directory) / DISTRIBUTION_FILE, pd.probs)


def load_distribution(directory, corpus: Corpus) -> ExactDistribution | None:
    path = Path(directory) / DISTRIBUTION_FILE
    if not path.exists():
        return None
    return ExactDistribution(corpus.n_tokens, corpus.max_len, np.load(path))
