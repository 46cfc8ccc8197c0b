"""Brute-force ground truth on small, fixed-length sequence spaces.

Every quantity here is a finite sum over all ``V**T`` sequences, accumulated
with :func:`math.fsum` so results do not depend on enumeration order.  Score
vectors are rebuilt from the logit table directly instead of going through
the generator's gradient code, so the oracle stays independent of the
estimators it checks.

Sign convention: estimators return ascent directions on log-likelihood.
:func:`check_descent_direction` therefore reports ``<E, -grad KL(p_d || p_theta)>``;
a positive value means following ``E`` decreases the divergence.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import SequenceBatch, TabularGenerator

MAX_SPACE = 10 ** 6


class OracleError(ValueError):
    pass


def _fsum_columns(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        return np.array(math.fsum(M))
    return np.array([math.fsum(col) for col in M.reshape(M.shape[0], -1).T]).reshape(M.shape[1:])


def all_sequences(V: int, T: int) -> np.ndarray:
    """Every length-``T`` sequence over ``V`` symbols, lexicographic (index = base-V number)."""
    if V ** T > MAX_SPACE:
        raise OracleError(f"space V**T = {V ** T} exceeds enumeration guard {MAX_SPACE}")
    idx = np.arange(V ** T)
    powers = V ** np.arange(T - 1, -1, -1)
    return (idx[:, None] // powers[None, :]) % V


def sequence_index(tokens: np.ndarray, V: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    T = tokens.shape[1]
    return tokens @ (V ** np.arange(T - 1, -1, -1))


@dataclass
class ExactDistribution:
    V: int
    T: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.probs.size != self.V ** self.T:
            raise OracleError(f"need {self.V ** self.T} probabilities, got {self.probs.size}")
        if np.any(self.probs < 0):
            raise OracleError("negative probability")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise OracleError(f"probabilities sum to {math.fsum(self.probs)!r}")

    def __len__(self) -> int:
        return self.probs.size

    def sequences(self) -> np.ndarray:
        return all_sequences(self.V, self.T)

    def batch(self) -> SequenceBatch:
        return SequenceBatch.fixed(self.sequences())

    def table(self) -> np.ndarray:
        return self.probs.reshape((self.V,) * self.T)

    def prefix_marginal(self, n: int) -> np.ndarray:
        """Probability of each length-``n`` prefix (lexicographic)."""
        return self.table().reshape(self.V ** n, -1).sum(axis=1) if n else np.ones(1)

    def sample(self, n: int, rng: np.random.Generator) -> SequenceBatch:
        cdf = np.cumsum(self.probs)
        idx = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="left"), self.probs.size - 1)
        return SequenceBatch.fixed(self.sequences()[idx], real=True)


def enumerate_distribution(model, V: int | None = None, T: int | None = None) -> ExactDistribution:
    """Exact probability table of a fixed-length generator, or validate a raw table."""
    if isinstance(model, ExactDistribution):
        return model
    if isinstance(model, np.ndarray):
        if V is None or T is None:
            raise OracleError("raw tables need V and T")
        return ExactDistribution(V, T, model)
    V = model.n_tokens if V is None else V
    T = model.max_len if T is None else T
    if getattr(model, "eos", None) is not None:
        raise OracleError("enumeration needs a fixed-length model (no EOS)")
    seqs = all_sequences(V, T)
    lp = model.log_prob(SequenceBatch.fixed(seqs))
    p = np.exp(lp)
    # Re-normalize the last ulps away so the table validates.
    return ExactDistribution(V, T, p / math.fsum(p))


def optimal_discriminator(pd: ExactDistribution, pp: ExactDistribution) -> np.ndarray:
    """``p_d / (p_d + p')`` per sequence, with 0/0 mapped to 0.5."""
    if (pd.V, pd.T) != (pp.V, pp.T):
        raise OracleError("distributions live on different spaces")
    num, den = pd.probs, pd.probs + pp.probs
    out = np.full(num.shape, 0.5)
    np.divide(num, den, out=out, where=den > 0)
    return out


def exact_kl(p: ExactDistribution, q: ExactDistribution) -> float:
    """``sum_x p log(p / q)``."""
    if (p.V, p.T) != (q.V, q.T):
        raise OracleError("distributions live on different spaces")
    bad = np.flatnonzero((p.probs > 0) & (q.probs <= 0))
    if bad.size:
        seqs = p.sequences()[bad[:10]].tolist()
        raise OracleError(f"support violation at {bad.size} sequences, e.g. {seqs}")
    s = p.probs > 0
    terms = p.probs[s] * (np.log(p.probs[s]) - np.log(q.probs[s]))
    return max(math.fsum(terms), 0.0)


class OracleDiscriminator:
    """Discriminator given by an explicit score per sequence of an enumerable space."""

    def __init__(self, V: int, T: int, scores, delta: float = 1e-4):
        self.V, self.T, self.delta = V, T, delta
        self.raw = np.asarray(scores, dtype=np.float64).reshape(-1)
        if self.raw.size != V ** T:
            raise OracleError("one score per sequence required")
        self.table = np.clip(self.raw, delta, 1 - delta)

    def score(self, batch: SequenceBatch) -> np.ndarray:
        if np.any(batch.lengths != self.T):
            raise OracleError("oracle discriminator scores full-length sequences only")
        return self.table[sequence_index(batch.tokens, self.V)]

    @classmethod
    def constant(cls, V: int, T: int, value: float = 0.5, delta: float = 1e-4) -> "OracleDiscriminator":
        return cls(V, T, np.full(V ** T, value), delta)


# -- score vectors -----------------------------------------------------------

def _require_tabular(gen) -> TabularGenerator:
    if not isinstance(gen, TabularGenerator) or gen.eos is not None or gen.banned:
        raise OracleError("exact gradients need a fixed-length tabular generator")
    return gen


def _oracle_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def step_scores(gen: TabularGenerator) -> np.ndarray:
    """``(V**T, T, P)`` array of per-step scores ``grad log p(a_t | s_t)``."""
    gen = _require_tabular(gen)
    V, T, c = gen.n_tokens, gen.max_len, gen.order
    seqs = all_sequences(V, T)
    n, P = seqs.shape[0], gen.n_contexts * V
    if n * T * P > 5 * 10 ** 7:
        raise OracleError("score tensor too large for the oracle")
    pi = _oracle_softmax(gen.logits)
    offsets = [sum(V ** j for j in range(k)) for k in range(c + 2)]
    S = np.zeros((n, T, gen.n_contexts, V))
    rows = np.arange(n)
    for t in range(T):
        hist = seqs[:, max(0, t - c):t]
        k = hist.shape[1]
        code = np.zeros(n, dtype=np.int64)
        for j in range(k):
            code = code * V + hist[:, j]
        ctx = offsets[k] + code
        S[rows, t, ctx, :] -= pi[ctx]
        S[rows, t, ctx, seqs[:, t]] += 1.0
    return S.reshape(n, T, P)


def sequence_scores(gen: TabularGenerator) -> np.ndarray:
    return step_scores(gen).sum(axis=1)


def exact_expected_grad(gen: TabularGenerator, weights: np.ndarray, scores: np.ndarray | None = None) -> np.ndarray:
    """``sum_x w(x) grad log p(x)``; a ``(V**T, T)`` weight array weights each step separately."""
    S = step_scores(gen) if scores is None else scores
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        terms = w[:, None, None] * S
    else:
        terms = w[:, :, None] * S
    return _fsum_columns(terms.reshape(-1, S.shape[2]))


def ratios_of(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return d / (1.0 - d)


def augmented_target(pprime: ExactDistribution, d: np.ndarray) -> tuple[np.ndarray, float]:
    """Target ``q = r_D p' / Z`` and the partition function ``Z = E_{p'}[r_D]``."""
    r = ratios_of(d)
    terms = r * pprime.probs
    Z = math.fsum(terms)
    return terms / Z, Z


def kl_gradient(gen: TabularGenerator, pd: ExactDistribution, scores=None) -> np.ndarray:
    """``grad_theta KL(p_d || p_theta) = -E_{p_d}[grad log p_theta]``."""
    return -exact_expected_grad(gen, pd.probs, scores)


def clamped_distribution(pd: ExactDistribution, gen: TabularGenerator, n_clamp: int) -> ExactDistribution:
    """``p_f = p_d(x_<=N) p_theta(x_>N | x_<=N)``."""
    ptheta = enumerate_distribution(gen)
    V, T = pd.V, pd.T
    if n_clamp >= T:
        return ExactDistribution(V, T, pd.probs.copy())
    pre = pd.prefix_marginal(n_clamp)
    th = ptheta.table().reshape(V ** n_clamp, -1)
    cond = th / th.sum(axis=1, keepdims=True)
    return ExactDistribution(V, T, (pre[:, None] * cond).reshape(-1))


def mixed_limit(gen: TabularGenerator, pd: ExactDistribution, d: np.ndarray, n_clamp: int,
                scores=None) -> np.ndarray:
    """Infinite-sample limit of the mixed estimator at clamp ``n_clamp``.

    Teacher-forced part ``E_{p_d}[grad log p(x_<=N)]`` plus, per prefix, the
    self-normalized completion part ``E_{q(.|prefix)}[grad log p(x_>N | prefix)]``
    with ``q(.|prefix) ~ r_D p_theta(.|prefix)``.
    """
    S = step_scores(gen) if scores is None else scores
    V, T = pd.V, pd.T
    N = min(n_clamp, T)
    w = np.zeros((V ** T, T))
    w[:, :N] = pd.probs[:, None]
    if N < T:
        ptheta = enumerate_distribution(gen)
        r = ratios_of(d).reshape(V ** N, -1)
        th = ptheta.probs.reshape(V ** N, -1)
        unnorm = r * th
        q_cond = unnorm / unnorm.sum(axis=1, keepdims=True)
        pre = pd.prefix_marginal(N)
        w[:, N:] = (pre[:, None] * q_cond).reshape(-1)[:, None]
    return exact_expected_grad(gen, w, S)


def exact_q(gen: TabularGenerator, d: np.ndarray) -> np.ndarray:
    """``(V**T, T)`` table of ``E[r_D(X) | X_<=t = x_<=t]`` under the generator."""
    ptheta = enumerate_distribution(gen)
    V, T = ptheta.V, ptheta.T
    r = ratios_of(d)
    Q = np.zeros((V ** T, T))
    for t in range(1, T + 1):
        pr = ptheta.probs.reshape(V ** t, -1)
        rr = r.reshape(V ** t, -1)
        cond = (pr * rr).sum(axis=1) / pr.sum(axis=1)
        Q[:, t - 1] = np.repeat(cond, V ** (T - t))
    return Q


def per_step_limit(gen: TabularGenerator, d: np.ndarray, scores=None) -> np.ndarray:
    """Infinite-batch limit of the per-step estimator with exact ``Q``."""
    ptheta = enumerate_distribution(gen)
    Q = exact_q(gen, d)
    T = ptheta.T
    denom = math.fsum((ptheta.probs[:, None] * Q).ravel())
    w = ptheta.probs[:, None] * Q * (T / denom)
    return exact_expected_grad(gen, w, scores)


# -- exact finite-batch expectations ----------------------------------------

def _rest_sum_distribution(values: np.ndarray, probs: np.ndarray, k: int):
    """Atoms and probabilities of the sum of ``k`` i.i.d. draws."""
    if k == 0:
        return np.zeros(1), np.ones(1)
    total, weight = np.zeros(1), np.ones(1)
    for _ in range(k):
        total = (total[:, None] + values[None, :]).ravel()
        weight = (weight[:, None] * probs[None, :]).ravel()
        if total.size > 2 * 10 ** 7:
            raise OracleError("finite-batch enumeration too large")
    return total, weight


def exact_maligan_mean(gen: TabularGenerator, d: np.ndarray, m: int, b: float = 0.0, scores=None) -> np.ndarray:
    """Exact expectation of the self-normalized estimator at batch size ``m`` (samples from ``p_theta``)."""
    S = sequence_scores(gen) if scores is None else scores.sum(axis=1)
    p = enumerate_distribution(gen).probs
    r = ratios_of(d)
    atoms, weight = _rest_sum_distribution(r, p, m - 1)
    # E[r_x / (r_x + S_rest)] for every x.
    frac = (r[:, None] / (r[:, None] + atoms[None, :])) @ weight
    coef = m * p * (frac - b / m)
    return _fsum_columns(coef[:, None] * S)


def exact_unnormalized_mean(gen: TabularGenerator, d: np.ndarray, scores=None) -> np.ndarray:
    S = sequence_scores(gen) if scores is None else scores.sum(axis=1)
    p = enumerate_distribution(gen).probs
    return _fsum_columns((p * ratios_of(d))[:, None] * S)


def exact_reinforce_mean(gen: TabularGenerator, d: np.ndarray, baseline: float, reward_kind: str = "D",
                         entropy_weight: float = 0.0, scores=None) -> np.ndarray:
    """``E_{p_theta}[(R(x) - b) grad log p(x)]`` plus the exact expected entropy-bonus term."""
    S = step_scores(gen) if scores is None else scores
    p = enumerate_distribution(gen).probs
    reward = np.asarray(d) if reward_kind == "D" else np.log(d)
    g = _fsum_columns((p * (reward - baseline))[:, None] * S.sum(axis=1))
    if entropy_weight:
        # Expected sum over visited states of the per-state entropy gradient.
        V, T = gen.n_tokens, gen.max_len
        pi = _oracle_softmax(gen.logits)
        H = -(pi * np.log(pi)).sum(axis=1, keepdims=True)
        dH = (-(pi * np.log(pi)) - pi * H)
        visits = np.zeros(gen.n_contexts)
        ctx = gen.contexts(all_sequences(V, T))
        np.add.at(visits, ctx.ravel(), np.repeat(p, T))
        g = g + entropy_weight * (visits[:, None] * dH).ravel()
    return g


def exact_mixed_mean(gen: TabularGenerator, pd: ExactDistribution, d: np.ndarray, n_clamp: int, n: int,
                     b: float = 0.0, scores=None) -> np.ndarray:
    """Exact expectation of the mixed estimator with ``n`` completions per real prefix."""
    S = step_scores(gen) if scores is None else scores
    V, T = pd.V, pd.T
    N = min(n_clamp, T)
    w = np.zeros((V ** T, T))
    w[:, :N] = pd.probs[:, None]
    if N < T:
        ptheta = enumerate_distribution(gen).probs.reshape(V ** N, -1)
        cond = ptheta / ptheta.sum(axis=1, keepdims=True)
        r = ratios_of(d).reshape(V ** N, -1)
        pre = pd.prefix_marginal(N)
        coef = np.zeros_like(r)
        for k in range(V ** N):
            atoms, weight = _rest_sum_distribution(r[k], cond[k], n - 1)
            frac = (r[k][:, None] / (r[k][:, None] + atoms[None, :])) @ weight
            coef[k] = pre[k] * n * cond[k] * (frac - b / n)
        w[:, N:] = coef.reshape(-1)[:, None]
    return exact_expected_grad(gen, w, S)


def _rollout_combos(gen: TabularGenerator, d: np.ndarray):
    """For single-rollout per-step estimation: every (sequence, rollout outcome) combination.

    Returns per-combination probability, the ``Q`` row it induces and the
    sequence index it belongs to.
    """
    ptheta = enumerate_distribution(gen)
    V, T = ptheta.V, ptheta.T
    r = ratios_of(d)
    probs, qs, owner = [], [], []
    tab = ptheta.probs
    for x in range(V ** T):
        per_t = []
        for t in range(1, T):
            block = V ** (T - t)
            start = (x // block) * block
            pr = tab[start:start + block]
            per_t.append((pr / pr.sum(), r[start:start + block]))
        for combo in itertools.product(*[range(len(c[0])) for c in per_t]):
            pc = tab[x]
            q = []
            for (cp, cr), j in zip(per_t, combo):
                pc *= cp[j]
                q.append(cr[j])
            q.append(r[x])
            probs.append(pc)
            qs.append(q)
            owner.append(x)
    return np.array(probs), np.array(qs), np.array(owner)


def exact_per_step_mean(gen: TabularGenerator, d: np.ndarray, m: int = 1, scores=None) -> np.ndarray:
    """Exact expectation of the per-step estimator with one rollout per position, ``m`` in {1, 2}."""
    if m not in (1, 2):
        raise OracleError("exact per-step expectation supports m = 1 or 2")
    S = step_scores(gen) if scores is None else scores
    T = gen.max_len
    probs, qs, owner = _rollout_combos(gen, d)
    tot = qs.sum(axis=1)
    if m == 1:
        scale = T / tot
    else:
        # Weight T * Q_it / (sum Q_1 + sum Q_2) for a pair of independent rows.
        scale = 2 * T / 2 * ((1.0 / (tot[:, None] + tot[None, :])) @ probs)
    coef = m * (probs * scale)[:, None] * qs
    w = np.zeros((S.shape[0], T))
    np.add.at(w, owner, coef)
    return exact_expected_grad(gen, w, S)


# -- estimator measurement -------------------------------------------------

@dataclass
class EstimatorStats:
    mean: np.ndarray
    se: np.ndarray
    cov_trace: float
    trials: int
    bias: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def z_scores(self) -> np.ndarray:
        if self.bias is None:
            raise OracleError("no reference expectation")
        # Components whose spread is at rounding level are treated as deterministic.
        noisy = self.se > 1e-12 * np.maximum(1.0, np.abs(self.mean))
        se = np.where(noisy, self.se, np.inf)
        return np.where(noisy, self.bias / se, np.where(np.abs(self.bias) > 1e-10, np.inf, 0.0))


def measure_estimator(estimator: Callable[[np.random.Generator], np.ndarray], trials: int,
                      rng: np.random.Generator, reference: np.ndarray | None = None) -> EstimatorStats:
    """Monte Carlo mean, per-component standard error and covariance trace over ``trials`` calls.

    ``estimator(rng)`` must draw its own minibatch and return a flat gradient.
    """
    first = np.asarray(estimator(rng), dtype=np.float64)
    total = np.zeros_like(first)
    total_sq = np.zeros_like(first)
    shift = first.copy()  # shifted accumulation keeps the variance numerically stable
    for k in range(trials):
        g = first if k == 0 else np.asarray(estimator(rng), dtype=np.float64)
        dlt = g - shift
        total += dlt
        total_sq += dlt * dlt
    mean_d = total / trials
    var = (total_sq - trials * mean_d * mean_d) / max(trials - 1, 1)
    var = np.maximum(var, 0.0)
    mean = shift + mean_d
    stats = EstimatorStats(mean, np.sqrt(var / trials), float(var.sum()), trials)
    if reference is not None:
        stats.bias = mean - np.asarray(reference)
    return stats


def check_descent_direction(estimate, gen: TabularGenerator, pd: ExactDistribution, scores=None) -> float:
    """``<E, -grad KL(p_d || p_theta)>``: positive when ``E`` is a descent direction for the divergence."""
    return float(np.dot(np.asarray(estimate), -kl_gradient(gen, pd, scores)))


# -- random instances -------------------------------------------------------

def random_tabular(V: int, T: int, rng: np.random.Generator, concentration: float = 1.0) -> TabularGenerator:
    """Full-history tabular generator with Dirichlet-distributed conditionals."""
    gen = TabularGenerator(V, T)
    probs = rng.dirichlet(np.full(V, concentration), size=gen.n_contexts)
    gen.params["logits"].value = np.log(probs)
    return gen


def interpolated_discriminator(dstar: np.ndarray, rng: np.random.Generator, low: float = 0.05,
                               high: float = 0.95) -> np.ndarray:
    """Scores strictly between 0.5 and ``D*`` (per-sequence mixing fraction in ``(low, high)``)."""
    alpha = rng.uniform(low, high, size=dstar.shape)
    return 0.5 + alpha * (dstar - 0.5)


@dataclass
class SingularInstance:
    gen: TabularGenerator
    pd: ExactDistribution
    disc: OracleDiscriminator
    omega: np.ndarray  # indices of sequences in the near-singular region


def singular_instance(V: int = 3, T: int = 3, omega_mass: float = 1e-4, data_mass: float = 0.3,
                      seed: int = 0, delta: float = 1e-4) -> SingularInstance:
    """Instance whose ratio ``r_D`` is huge on a region the generator almost never visits.

    The region is every sequence starting with the last symbol: the generator
    gives that first symbol probability ``omega_mass``, the data ``data_mass``.
    The discriminator is optimal (``D*`` clamped to ``[delta, 1-delta]``).
    """
    rng = np.random.default_rng(seed)
    gen = random_tabular(V, T, rng, concentration=2.0)
    first = np.full(V, (1 - omega_mass) / (V - 1))
    first[-1] = omega_mass
    logits = gen.logits.copy()
    logits[0] = np.log(first)
    gen.params["logits"].value = logits
    data_gen = random_tabular(V, T, rng, concentration=2.0)
    first_d = np.full(V, (1 - data_mass) / (V - 1))
    first_d[-1] = data_mass
    dl = data_gen.logits.copy()
    dl[0] = np.log(first_d)
    data_gen.params["logits"].value = dl
    pd = enumerate_distribution(data_gen)
    ptheta = enumerate_distribution(gen)
    disc = OracleDiscriminator(V, T, optimal_discriminator(pd, ptheta), delta)
    omega = np.flatnonzero(all_sequences(V, T)[:, 0] == V - 1)
    return SingularInstance(gen, pd, disc, omega)
