"""Adversarial training loops: basic importance-weighted training and the clamped, mixed variant.

Randomness is split into independent streams derived from the run seed so
that, for example, discriminator sampling never perturbs the generator's
data stream.  This is what makes an ``N = T, K = 0`` mixed run replay a
pure likelihood run bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Corpus
from .estimators import (BaselineSchedule, GradientVector, MovingBaseline, maligan_grad,
                         mixed_mle_mali_grad, mle_grad, reinforce_grad)
from .metrics import bleu2, mean_nll, perplexity
from .models import (BOS, EOS, PAD, Discriminator, Generator, RecurrentGenerator, SequenceBatch,
                     TabularGenerator)
from .oracle import ExactDistribution, OracleError, enumerate_distribution, exact_kl
from .rollout import per_step_grad

ESTIMATORS = ("maligan-basic", "maligan-mcts", "mixed", "reinforce", "mle")
METRIC_COLUMNS = ("iteration", "disc_obj", "z_hat", "ess", "b", "N", "kl_exact",
                  "valid_nll", "test_nll", "wallclock_s")
OUTPUT_DIR_ENV = "MALIGAN_OUTPUT_DIR"


class DivergenceError(RuntimeError):
    """Training aborted by the divergence guard; ``report`` holds the partial run."""

    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    estimator: str = "maligan-basic"
    iterations: int = 200
    seed: int = 0
    # loop knobs: k disc steps, m real/fake rows, n completions, K clamp decrement
    k: int = 1
    m: int = 32
    n: int = 8
    max_len: int = 6
    K: int = 1
    N0: int = -1  # -1: start fully clamped (N0 = max_len)
    baseline_start: float = 0.0
    baseline_end: float = 1.0
    baseline_ramp: int = -1  # -1: first half of the generator updates
    n_rollouts: int = 16
    reward_kind: str = "D"
    entropy_weight: float = 0.0
    # optimization
    lr_gen: float = 0.1
    lr_disc: float = 0.01
    optimizer: str = "sgd"
    disc_optimizer: str = "adam"
    pretrain_gen_epochs: int = 20
    pretrain_disc_epochs: int = 5
    pretrain_batch: int = 32
    lr_pretrain: float = 0.1
    # models
    generator: str = "tabular"
    order: int = -1  # -1: full history
    embed_dim: int = 8
    hidden: int = 16
    disc_embed_dim: int = 8
    disc_hidden: int = 16
    delta: float = 1e-4
    # task (used by the CLI to build the corpus)
    task: str = "grammar"
    vocab_size: int = 4
    concentration: float = 1.0
    grammar_order: int = -1  # -1: full-history grammar
    n_samples: int = 10000
    grid_side: int = 3
    grid_patterns: int = 4
    grid_noise: float = 0.1
    corpus_dir: str = ""
    # bookkeeping
    checkpoint_every: int = 0
    eval_every: int = 1
    bleu_samples: int = 0
    guard_low: float = 1e-3
    guard_high: float = 1e3
    guard_patience: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.estimator == "mixed" and self.baseline_end > 0 and self.n < 2:
            raise ValueError("n must be >= 2 for mixed training with a positive baseline")
        if not 0 <= self.K <= self.max_len:
            raise ValueError("K must lie in [0, max_len]")
        if self.N0 > self.max_len:
            raise ValueError("N0 must not exceed max_len")
        if self.optimizer not in ("sgd", "adam") or self.disc_optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    @property
    def initial_clamp(self) -> int:
        return self.max_len if self.N0 < 0 else self.N0

    def schedule(self) -> BaselineSchedule:
        ramp = self.baseline_ramp if self.baseline_ramp >= 0 else self.iterations // 2
        return BaselineSchedule(ramp, self.baseline_start, self.baseline_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}


@dataclass
class RunReport:
    config: dict
    initial: dict
    final: dict
    metrics: list[dict]
    checkpoints: list[str] = field(default_factory=list)
    guard_tripped: bool = False
    guard_reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return x.item()
            return x
        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


@dataclass
class RunState:
    iteration: int
    N: int
    gen: Generator
    disc: Discriminator
    snapshot: object | None = None
    guard_count: int = 0


class Streams:
    """Independent RNG streams derived from one seed."""

    NAMES = ("pretrain", "disc", "gen_samples", "gen_data", "completions", "eval")

    def __init__(self, seed: int):
        seqs = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, s in zip(self.NAMES, seqs):
            setattr(self, name, np.random.default_rng(s))


class MetricsWriter:
    """Append-only CSV with the fixed column order of ``METRIC_COLUMNS``."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        rows = []
        for rec in reader:
            rows.append({k: (float(v) if v not in ("",) else math.nan) for k, v in zip(header, rec)})
        return rows


# -- model construction -------------------------------------------------------

def build_generator(config: TrainConfig, corpus: Corpus) -> Generator:
    text = corpus.kind == "text"
    eos = EOS if text else None
    banned = (BOS, PAD) if text else ()
    if config.generator == "tabular":
        order = None if config.order < 0 else config.order
        return TabularGenerator(corpus.n_tokens, corpus.max_len, order=order, eos=eos, banned=banned)
    if config.generator == "recurrent":
        return RecurrentGenerator(corpus.n_tokens, corpus.max_len, config.embed_dim, config.hidden,
                                  eos=eos, banned=banned, seed=config.seed)
    raise ValueError(f"unknown generator {config.generator!r}")


def build_discriminator(config: TrainConfig, corpus: Corpus) -> Discriminator:
    return Discriminator(corpus.n_tokens, config.disc_embed_dim, config.disc_hidden, config.delta,
                         seed=config.seed + 1)


def _step(params: ad.ParamStore, lr: float, optimizer: str) -> None:
    if optimizer == "adam":
        ad.adam_step(params, lr)
    else:
        ad.sgd_step(params, lr)


def disc_objective(disc: Discriminator, real: SequenceBatch, fake: SequenceBatch) -> float:
    """``sum log D(y) + sum log(1 - D(x))`` with clamped scores."""
    dr, df = disc.score(real), disc.score(fake)
    return float(math.fsum(np.log(dr)) + math.fsum(np.log1p(-df)))


def disc_update_step(disc: Discriminator, real: SequenceBatch, fake: SequenceBatch, lr: float,
                     optimizer: str = "adam") -> float:
    """One ascent step on the discriminator objective; returns the pre-step objective."""
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator update needs non-empty batches")
    obj = disc_objective(disc, real, fake)
    if not math.isfinite(obj):
        raise FloatingPointError("non-finite discriminator objective")
    disc.params.zero_grads()
    # Descend on the negated (unclamped) objective.
    obj_t = ad.reduce_sum(ad.log_sigmoid(disc.logits(real)))
    obj_t = obj_t + ad.reduce_sum(ad.log_sigmoid(ad.mul(disc.logits(fake), -1.0)))
    loss = ad.mul(obj_t, -1.0)
    ad.backward(loss)
    _step(disc.params, lr, optimizer)
    return obj


def sample_real(batch: SequenceBatch, m: int, rng: np.random.Generator) -> SequenceBatch:
    out = batch.rows(rng.integers(0, len(batch), size=m))
    out.real = True
    return out


def pretrain_generator(gen: Generator, corpus: Corpus, epochs: int, batch_size: int, lr: float,
                       rng: np.random.Generator, optimizer: str = "sgd") -> None:
    train = corpus["train"]
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            gen.apply_gradient(mle_grad(gen, train.rows(order[start:start + batch_size])).values, lr, optimizer)


def pretrain_discriminator(disc: Discriminator, gen: Generator, corpus: Corpus, epochs: int,
                           batch_size: int, lr: float, rng: np.random.Generator,
                           optimizer: str = "adam") -> None:
    train = corpus["train"]
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            real = train.rows(order[start:start + batch_size])
            disc_update_step(disc, real, gen.sample(len(real), rng), lr, optimizer)


def pretrain(config: TrainConfig, corpus: Corpus, gen: Generator | None = None,
             disc: Discriminator | None = None) -> tuple[Generator, Discriminator]:
    """MLE-pretrain a generator, then pretrain a discriminator against it."""
    streams = Streams(config.seed)
    gen = build_generator(config, corpus) if gen is None else gen
    disc = build_discriminator(config, corpus) if disc is None else disc
    pretrain_generator(gen, corpus, config.pretrain_gen_epochs, config.pretrain_batch, config.lr_pretrain,
                       streams.pretrain, config.optimizer)
    gen.step = 0
    pretrain_discriminator(disc, gen, corpus, config.pretrain_disc_epochs, config.pretrain_batch,
                           config.lr_disc, streams.pretrain, config.disc_optimizer)
    return gen, disc


def evaluate(gen: Generator, corpus: Corpus, pd: ExactDistribution | None = None,
             bleu_samples: int = 0, seed: int = 0) -> dict:
    """Validation/test NLL and perplexity, exact KL when ``pd`` is given, optional BLEU-2."""
    out = {}
    for split in ("valid", "test"):
        if split in corpus.splits and len(corpus[split]):
            out[f"{split}_nll"] = mean_nll(gen, corpus[split])
            out[f"{split}_ppl"] = perplexity(gen, corpus[split])
    if pd is not None:
        try:
            out["kl_exact"] = exact_kl(pd, enumerate_distribution(gen))
        except OracleError:  # generator lost support on data sequences
            out["kl_exact"] = math.inf
    if bleu_samples and "test" in corpus.splits:
        hyps = gen.sample(bleu_samples, np.random.default_rng([seed, 7])).to_lists()
        refs = corpus["test"].to_lists()
        out["bleu2"] = bleu2(hyps, refs)
    return out


# -- main loops ---------------------------------------------------------------

class _Run:
    def __init__(self, config, corpus, pd, gen, disc, output_dir):
        self.config, self.corpus, self.pd = config, corpus, pd
        out = output_dir if output_dir is not None else os.environ.get(OUTPUT_DIR_ENV)
        self.out = Path(out) if out else None
        if self.out is not None:
            (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.streams = Streams(config.seed)
        if gen is None or disc is None:
            gen, disc = pretrain(config, corpus, gen, disc)
        self.state = RunState(0, config.initial_clamp, gen, disc)
        self.schedule = config.schedule()
        self.writer = MetricsWriter(self.out / "metrics.csv" if self.out else None)
        self.rows: list[dict] = []
        self.checkpoints: list[str] = []
        self.t0 = time.perf_counter()
        self.initial = self.eval_row(0, {}, math.nan)

    def eval_row(self, iteration: int, diag: dict, disc_obj: float, force: bool = True) -> dict:
        row = {"iteration": iteration, "disc_obj": disc_obj, "z_hat": diag.get("z_hat", math.nan),
               "ess": diag.get("ess", math.nan), "b": diag.get("b", math.nan), "N": diag.get("N", math.nan)}
        cfg = self.config
        if force or (cfg.eval_every and iteration % cfg.eval_every == 0):
            ev = evaluate(self.state.gen, self.corpus, self.pd)
            row["kl_exact"] = ev.get("kl_exact", math.nan)
            row["valid_nll"] = ev.get("valid_nll", math.nan)
            row["test_nll"] = ev.get("test_nll", math.nan)
        row["wallclock_s"] = time.perf_counter() - self.t0
        self.rows.append(row)
        self.writer.write(row)
        return row

    def save_checkpoint(self, tag: str) -> None:
        if self.out is None:
            return
        gen, disc = self.state.gen, self.state.disc
        gpath = self.out / "checkpoints" / f"gen_{tag}.ckpt"
        ad.save_checkpoint(gpath, gen.params, dict(gen.meta(), step=gen.step))
        dpath = self.out / "checkpoints" / f"disc_{tag}.ckpt"
        ad.save_checkpoint(dpath, disc.params, disc.meta())
        self.checkpoints += [str(gpath), str(dpath)]

    def after_update(self, grad: GradientVector, disc_obj: float) -> None:
        st, cfg = self.state, self.config
        if st.snapshot is not None and st.gen.step - st.snapshot.step != 1:
            raise AssertionError("snapshot must lag the generator by exactly one update")
        if not np.all(np.isfinite(st.gen.params.flatten())):
            self.trip("non-finite generator parameters")
        z = grad.diagnostics.get("z_hat", 1.0)
        st.guard_count = st.guard_count + 1 if not (cfg.guard_low <= z <= cfg.guard_high) else 0
        self.eval_row(st.iteration, grad.diagnostics, disc_obj, force=False)
        if st.guard_count >= cfg.guard_patience:
            self.trip(f"z_hat outside [{cfg.guard_low}, {cfg.guard_high}] for {st.guard_count} updates")
        if cfg.checkpoint_every and st.iteration % cfg.checkpoint_every == 0:
            self.save_checkpoint(f"iter{st.iteration:06d}")

    def report(self, tripped: bool = False, reason: str = "") -> RunReport:
        final = evaluate(self.state.gen, self.corpus, self.pd, self.config.bleu_samples, self.config.seed)
        rep = RunReport(self.config.to_dict(), dict(self.initial), final, list(self.rows),
                        list(self.checkpoints), tripped, reason)
        if self.out is not None:
            rep.save(self.out / "run_report.json")
        return rep

    def trip(self, reason: str):
        self.save_checkpoint("diverged")
        raise DivergenceError(reason, self.report(True, reason))

    def finish(self) -> RunReport:
        self.save_checkpoint("final")
        return self.report()


def run_maligan(config: TrainConfig, corpus: Corpus, pd: ExactDistribution | None = None,
                gen: Generator | None = None, disc: Discriminator | None = None,
                output_dir=None) -> RunReport:
    """Alternate ``k`` discriminator steps with one generator step (basic algorithm).

    Supports the free-running estimators (``maligan-basic``, ``maligan-mcts``,
    ``reinforce``) and the ``mle`` reference.  ``gen``/``disc`` are used as
    given (and mutated); when omitted they are built and pretrained.
    """
    run = _Run(config, corpus, pd, gen, disc, output_dir)
    st, cfg, sm = run.state, config, run.streams
    train = corpus["train"]
    moving = MovingBaseline()
    for it in range(1, cfg.iterations + 1):
        st.iteration = it
        b = run.schedule.value(it - 1)
        disc_obj = math.nan
        if cfg.estimator == "mle":
            st.snapshot = st.gen.snapshot()
            grad = mle_grad(st.gen, sample_real(train, cfg.m, sm.gen_data))
            grad.diagnostics.update(N=corpus.max_len, b=math.nan)
        else:
            st.snapshot = st.gen.snapshot()
            for _ in range(cfg.k):
                fake = st.snapshot.sample(cfg.m, sm.disc)
                real = sample_real(train, cfg.m, sm.disc)
                disc_obj = disc_update_step(st.disc, real, fake, cfg.lr_disc, cfg.disc_optimizer)
            batch = st.gen.sample(cfg.m, sm.gen_samples)
            if cfg.estimator == "maligan-basic":
                grad = maligan_grad(st.gen, st.disc, batch, b)
            elif cfg.estimator == "maligan-mcts":
                grad = per_step_grad(st.gen, st.disc, batch, cfg.n_rollouts, sm.completions)
                grad.diagnostics["b"] = math.nan
            else:
                grad = reinforce_grad(st.gen, st.disc, batch, cfg.reward_kind, moving, cfg.entropy_weight)
                grad.diagnostics["b"] = grad.diagnostics["baseline"]
            grad.diagnostics["N"] = 0
        st.gen.apply_gradient(grad.values, cfg.lr_gen, cfg.optimizer)
        run.after_update(grad, disc_obj)
    return run.finish()


def run_sequential_maligan(config: TrainConfig, corpus: Corpus, pd: ExactDistribution | None = None,
                           gen: Generator | None = None, disc: Discriminator | None = None,
                           output_dir=None) -> RunReport:
    """Clamped training: ``N`` starts at ``N0`` and drops by ``K`` every outer iteration (floor 0)."""
    run = _Run(config, corpus, pd, gen, disc, output_dir)
    st, cfg, sm = run.state, config, run.streams
    train = corpus["train"]
    for it in range(1, cfg.iterations + 1):
        st.iteration = it
        st.N = max(st.N - cfg.K, 0)
        b = run.schedule.value(it - 1)
        st.snapshot = st.gen.snapshot()
        disc_obj = math.nan
        for _ in range(cfg.k):
            real = sample_real(train, cfg.m, sm.disc)
            fake = _clamped_fakes(st.snapshot, real, st.N, sm.disc)
            disc_obj = disc_update_step(st.disc, real, fake, cfg.lr_disc, cfg.disc_optimizer)
        real_g = sample_real(train, cfg.m, sm.gen_data)
        grad = mixed_mle_mali_grad(st.gen, st.disc, real_g, st.N, cfg.n, b, sm.completions)
        st.gen.apply_gradient(grad.values, cfg.lr_gen, cfg.optimizer)
        run.after_update(grad, disc_obj)
    return run.finish()


def _clamped_fakes(snapshot, real: SequenceBatch, n_clamp: int, rng) -> SequenceBatch:
    """Clamp each real row to its first ``min(N, len)`` tokens and complete it."""
    if np.all(real.lengths >= n_clamp):
        return snapshot.clamped_sample(real, n_clamp, rng)
    parts = []
    for length in np.unique(np.minimum(real.lengths, n_clamp)):
        rows = np.flatnonzero(np.minimum(real.lengths, n_clamp) == length)
        parts.append((rows, snapshot.clamped_sample(real.rows(rows), int(length), rng)))
    width = max(p.width for _, p in parts)
    tokens = np.full((len(real), width), PAD, dtype=np.int64)
    lengths = np.zeros(len(real), dtype=np.int64)
    for rows, p in parts:
        tokens[rows, :p.width] = p.tokens
        lengths[rows] = p.lengths
    return SequenceBatch(tokens, lengths, clamp=n_clamp)


def run(config: TrainConfig, corpus: Corpus, pd: ExactDistribution | None = None, **kw) -> RunReport:
    if config.estimator == "mixed":
        return run_sequential_maligan(config, corpus, pd, **kw)
    return run_maligan(config, corpus, pd, **kw)
