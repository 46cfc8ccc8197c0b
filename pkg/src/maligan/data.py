"""Corpora: synthetic grammar and binary-grid generators, plus on-disk round trips.

On disk a corpus is a directory holding ``corpus.json`` (kind, alphabet
size, max length), one ``<split>.txt`` per split with one sequence per line,
and ``vocab.txt`` for text corpora.  Token sequences are space separated;
grid corpora are written as runs of ``0``/``1`` characters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import EOS, SequenceBatch, TabularGenerator, Vocab
from .oracle import ExactDistribution, enumerate_distribution

SPLITS = ("train", "valid", "test")


@dataclass
class Corpus:
    """Tokenized splits over a shared alphabet.

    ``kind`` is ``"fixed"`` (every sequence has ``max_len`` symbols from
    ``0..n_tokens-1``), ``"grid"`` (fixed, binary, printed as bit strings) or
    ``"text"`` (variable length with EOS, tokens from ``vocab``).
    """

    splits: dict[str, SequenceBatch]
    n_tokens: int
    max_len: int
    kind: str = "fixed"
    vocab: Vocab | None = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> SequenceBatch:
        return self.splits[split]

    def check(self) -> None:
        for name, b in self.splits.items():
            toks = b.tokens[b.mask()]
            if toks.size and (toks.min() < 0 or toks.max() >= self.n_tokens):
                raise ValueError(f"split {name!r} has tokens outside the alphabet")
            if b.lengths.size and b.lengths.max() > self.max_len:
                raise ValueError(f"split {name!r} has sequences longer than {self.max_len}")

    # -- persistence -------------------------------------------------------
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"kind": self.kind, "n_tokens": self.n_tokens, "max_len": self.max_len,
                    "splits": list(self.splits), "meta": self.meta}
        (d / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if self.vocab is not None:
            self.vocab.save(d / "vocab.txt")
        for name, batch in self.splits.items():
            (d / f"{name}.txt").write_text("".join(self.format_sequence(s) + "\n" for s in batch.to_lists()))

    def format_sequence(self, seq: list[int]) -> str:
        if self.kind == "grid":
            return "".join(str(t) for t in seq)
        if self.kind == "text":
            assert self.vocab is not None
            return " ".join(self.vocab.decode([t for t in seq if t != EOS]))
        return " ".join(str(t) for t in seq)

    @classmethod
    def load(cls, directory) -> "Corpus":
        d = Path(directory)
        manifest = json.loads((d / "corpus.json").read_text())
        kind, V, T = manifest["kind"], manifest["n_tokens"], manifest["max_len"]
        vocab = Vocab.load(d / "vocab.txt") if kind == "text" else None
        splits = {}
        for name in manifest["splits"]:
            lines = (d / f"{name}.txt").read_text().splitlines()
            if kind == "grid":
                seqs = [[int(ch) for ch in ln] for ln in lines]
            elif kind == "text":
                seqs = [vocab.encode(ln.split()) + [EOS] for ln in lines]
            else:
                seqs = [[int(tok) for tok in ln.split()] for ln in lines]
            splits[name] = SequenceBatch.from_lists(seqs, width=T, real=True)
        corpus = cls(splits, V, T, kind, vocab, manifest.get("meta", {}))
        corpus.check()
        return corpus


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return {"train": np.sort(perm[:a]), "valid": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


def grammar_generator(V: int, T: int, seed: int, concentration: float = 1.0,
                      order: int | None = None) -> TabularGenerator:
    """Tabular model whose conditionals are symmetric-Dirichlet draws.

    ``order=None`` conditions on the full history; ``order=1`` gives a Markov chain.
    """
    rng = np.random.default_rng(seed)
    gen = TabularGenerator(V, T, order=order)
    if np.isinf(concentration):
        return gen
    probs = rng.dirichlet(np.full(V, float(concentration)), size=gen.n_contexts)
    gen.params["logits"].value = np.log(np.maximum(probs, 1e-300))
    return gen


def synth_grammar(V: int, T: int, seed: int, concentration: float = 1.0,
                  n_samples: int = 10000, order: int | None = None) -> tuple[ExactDistribution, Corpus]:
    """Random data distribution over ``V**T`` sequences and an 80/10/10 split of i.i.d. samples.

    Splits are disjoint sets of draws; identical sequences can occur in
    several splits because the space is small.
    """
    gen = grammar_generator(V, T, seed, concentration, order)
    pd = enumerate_distribution(gen)
    rng = np.random.default_rng([seed, 1])
    sample = pd.sample(n_samples, rng)
    idx = split_indices(n_samples, rng)
    splits = {k: SequenceBatch.fixed(sample.tokens[v], real=True) for k, v in idx.items()}
    corpus = Corpus(splits, V, T, "fixed", meta={"generator": "grammar", "seed": seed,
                                                 "concentration": concentration, "order": order})
    return pd, corpus


def synth_grid(side: int, n_patterns: int, noise: float, seed: int,
               n_samples: int = 10000) -> tuple[Corpus, np.ndarray]:
    """Noisy copies of random binary prototype grids, flattened row-major.

    Returns the corpus and the ``(n_patterns, side*side)`` prototype matrix.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    L = side * side
    protos = rng.integers(0, 2, size=(n_patterns, L))
    which = rng.integers(0, n_patterns, size=n_samples)
    flips = rng.random((n_samples, L)) < noise
    data = np.where(flips, 1 - protos[which], protos[which])
    idx = split_indices(n_samples, rng)
    splits = {k: SequenceBatch.fixed(data[v], real=True) for k, v in idx.items()}
    corpus = Corpus(splits, 2, L, "grid", meta={"generator": "grid", "seed": seed, "side": side,
                                                "n_patterns": n_patterns, "noise": noise})
    return corpus, protos


def load_text_corpus(directory, max_len: int) -> Corpus:
    """Read ``train/valid/test.txt`` of whitespace-tokenized sentences.

    EOS is appended; sentences longer than ``max_len - 1`` words are dropped.
    The vocabulary is built from the training split; unknown words in other
    splits raise.
    """
    d = Path(directory)
    raw = {}
    for name in SPLITS:
        path = d / f"{name}.txt"
        if path.exists():
            raw[name] = [ln.split() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if "train" not in raw:
        raise FileNotFoundError(f"{d} has no train.txt")
    words = sorted({w for s in raw["train"] for w in s})
    vocab = Vocab(words)
    splits = {}
    for name, sents in raw.items():
        keep = [vocab.encode(s) + [EOS] for s in sents if len(s) < max_len]
        splits[name] = SequenceBatch.from_lists(keep, width=max_len, real=True)
    return Corpus(splits, len(vocab), max_len, "text", vocab)
