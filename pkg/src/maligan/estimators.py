"""Generator gradient estimators.

Every estimator reduces to a per-step weighted score sum
``sum_{i,t} w_it grad log p(a_it | s_it)`` evaluated by the generator, so
they work unchanged for tabular and recurrent generators.  Returned
gradients point uphill on the generator's (augmented) log-likelihood: apply
them with gradient ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Generator, SequenceBatch

DEFAULT_DELTA = 1e-4


class EstimatorError(ValueError):
    pass


@dataclass
class GradientVector:
    """Flat gradient aligned with the generator's ParamStore ordering, plus diagnostics."""

    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class WeightedBatch:
    sequences: SequenceBatch
    scores: np.ndarray
    ratios: np.ndarray
    weights: np.ndarray
    groups: np.ndarray

    @property
    def z_hat(self) -> float:
        return float(self.ratios.mean())

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())

    @property
    def ess(self) -> float:
        # Effective sample size of the self-normalized (pre-baseline) weights.
        r = self.ratios
        return float(r.sum() ** 2 / (r * r).sum())

    def diagnostics(self) -> dict:
        return {"z_hat": self.z_hat, "max_ratio": self.max_ratio, "ess": self.ess,
                "weight_sum": float(self.weights.sum()), "m": int(len(self.ratios))}


@dataclass
class BaselineSchedule:
    """Linear ramp of the baseline from ``start`` to ``end`` over ``ramp`` generator updates."""

    ramp: int
    start: float = 0.0
    end: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError("need 0 <= start <= end <= 1")

    def value(self, update: int) -> float:
        if self.ramp <= 0:
            return self.end
        frac = min(max(update, 0) / self.ramp, 1.0)
        return self.start + (self.end - self.start) * frac


class MovingBaseline:
    """Exponential moving average of mean rewards (decay 0.9 by default)."""

    def __init__(self, decay: float = 0.9, initial: float = 0.0):
        self.decay = decay
        self.value = initial
        self._started = False

    def update(self, rewards: np.ndarray) -> float:
        mean = float(np.mean(rewards))
        if not self._started:
            self.value, self._started = mean, True
        else:
            self.value = self.decay * self.value + (1 - self.decay) * mean
        return self.value


def ratio(d_score, delta: float = DEFAULT_DELTA):
    """``D / (1 - D)`` for scores already clamped into ``[delta, 1 - delta]``."""
    d = np.asarray(d_score, dtype=np.float64)
    # Small slack: clamped scores can land one ulp outside after arithmetic.
    # Written so that NaN fails the test too.
    if d.size and not (d.min() >= delta * (1 - 1e-12) and d.max() <= 1 - delta * (1 - 1e-12)):
        raise EstimatorError(f"discriminator score outside [{delta}, {1 - delta}]")
    r = d / (1.0 - d)
    return float(r) if r.ndim == 0 else r


def normalized_weights(ratios, b: float) -> np.ndarray:
    """``r_i / sum_j r_j - b / m``; the weights sum to ``1 - b``."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.size == 0:
        raise EstimatorError("empty batch")
    if np.any(r <= 0):
        raise EstimatorError("ratios must be positive")
    m = r.size
    total = r.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(m, 1.0 / m - b / m)
    return r / total - b / m


def group_weights(ratios, groups, b: float, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Normalize within each group; a group sitting entirely at the clamp floor falls back to uniform."""
    r = np.asarray(ratios, dtype=np.float64)
    groups = np.asarray(groups)
    floor = delta / (1 - delta)
    if groups.size and groups.min() == groups.max():
        if r.max() <= floor * (1 + 1e-12):
            return np.full(r.size, (1.0 - b) / r.size)
        return normalized_weights(r, b)
    w = np.empty_like(r)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        n = idx.size
        if np.all(r[idx] <= floor * (1 + 1e-12)):
            w[idx] = 1.0 / n - b / n
        else:
            w[idx] = normalized_weights(r[idx], b)
    return w


def _finite(g: np.ndarray, batch: SequenceBatch, gen: Generator, weights: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        for i in range(len(batch)):
            gi = gen.grad_weighted(batch.rows(i), weights[i:i + 1])
            if not np.all(np.isfinite(gi)):
                raise EstimatorError(f"non-finite gradient from sequence {i}")
        raise EstimatorError("non-finite gradient")
    return g


def sequence_weighted_grad(gen: Generator, batch: SequenceBatch, seq_weights: np.ndarray) -> np.ndarray:
    """``sum_i w_i grad log p(x_i)``."""
    w = batch.mask() * np.asarray(seq_weights, dtype=np.float64)[:, None]
    return _finite(gen.grad_weighted(batch, w), batch, gen, w)


def weigh(disc, batch: SequenceBatch, b: float, groups=None) -> WeightedBatch:
    delta = getattr(disc, "delta", DEFAULT_DELTA)
    d = disc.score(batch)
    r = ratio(d, delta)
    r = np.atleast_1d(r)
    if groups is None:
        groups = np.zeros(len(batch), dtype=np.int64)
    w = group_weights(r, groups, b, delta)
    return WeightedBatch(batch, d, r, w, np.asarray(groups))


def maligan_grad(gen: Generator, disc, batch: SequenceBatch, b: float = 0.0) -> GradientVector:
    """Self-normalized importance-weighted likelihood gradient on generator samples."""
    wb = weigh(disc, batch, b)
    g = sequence_weighted_grad(gen, batch, wb.weights)
    diag = wb.diagnostics()
    diag["b"] = b
    return GradientVector(g, diag)


def unnormalized_is_grad(gen: Generator, disc, batch: SequenceBatch) -> GradientVector:
    """Plain importance estimator ``(1/m) sum_i r_i grad log p(x_i)`` (no partition estimate)."""
    delta = getattr(disc, "delta", DEFAULT_DELTA)
    r = np.atleast_1d(ratio(disc.score(batch), delta))
    g = sequence_weighted_grad(gen, batch, r / len(batch))
    return GradientVector(g, {"z_hat": float(r.mean()), "max_ratio": float(r.max())})


def reinforce_grad(gen: Generator, disc, batch: SequenceBatch, reward_kind: str = "D",
                   baseline: "float | MovingBaseline" = 0.0, entropy_weight: float = 0.0) -> GradientVector:
    """Score-function gradient with reward ``D`` or ``log D`` plus an entropy bonus.

    ``baseline`` is either a fixed number or a :class:`MovingBaseline`, which
    is read before and updated after the call.
    """
    d = disc.score(batch)
    if reward_kind == "D":
        rewards = d
    elif reward_kind == "logD":
        rewards = np.log(d)
    else:
        raise EstimatorError(f"unknown reward kind {reward_kind!r}")
    m = len(batch)
    if isinstance(baseline, MovingBaseline):
        bval = baseline.value
        baseline.update(rewards)
    else:
        bval = float(baseline)
    g = sequence_weighted_grad(gen, batch, (rewards - bval) / m)
    if entropy_weight:
        g = g + entropy_weight * gen.grad_entropy(batch, batch.mask() / m)
    return GradientVector(g, {"mean_reward": float(np.mean(rewards)), "baseline": bval})


def mle_grad(gen: Generator, batch: SequenceBatch) -> GradientVector:
    """Teacher-forced likelihood gradient ``(1/m) sum_i grad log p(y_i)``."""
    gen.check_tokens(batch)
    m = len(batch)
    g = gen.grad_weighted(batch, batch.mask() / m)
    return GradientVector(g, {"m": m})


def _prefix_weights(real: SequenceBatch, n_clamp: int) -> np.ndarray:
    # Teacher-forced steps: positions < min(N, length).
    pos = np.arange(real.width)[None, :]
    return (pos < np.minimum(real.lengths, n_clamp)[:, None]).astype(np.float64)


def mixed_mle_mali_grad(gen: Generator, disc, real: SequenceBatch, n_clamp: int, n: int,
                        b: float, rng: np.random.Generator) -> GradientVector:
    """Teacher force the first ``n_clamp`` tokens of each real sequence, weight free-running completions.

    Each real sequence longer than ``n_clamp`` spawns ``n`` completions; their
    ratios are normalized within that group only.  The free-running term is
    averaged over the ``m`` real sequences, like the teacher-forced term.
    """
    m = len(real)
    if m == 0:
        raise EstimatorError("empty real batch")
    if b > 0 and n < 2:
        raise EstimatorError("group renormalization needs n >= 2 when b > 0")
    gen.check_tokens(real)
    tf = _prefix_weights(real, n_clamp) / m
    g_tf = gen.grad_weighted(real, tf)
    long_rows = np.flatnonzero(real.lengths > n_clamp)
    diag = {"N": n_clamp, "b": b, "n": n, "m": m, "groups": int(long_rows.size)}
    if long_rows.size == 0:
        diag.update(z_hat=1.0, ess=float(n), weight_sum=0.0)
        return GradientVector(g_tf, diag)
    prefixes = real.rows(np.repeat(long_rows, n))
    fakes = gen.clamped_sample(prefixes, n_clamp, rng, max_len=max(gen.max_len, real.width))
    groups = np.repeat(np.arange(long_rows.size), n)
    fakes.groups = groups
    wb = weigh(disc, fakes, b, groups)
    free = (np.arange(fakes.width)[None, :] >= n_clamp) & fakes.mask()
    g_free = gen.grad_weighted(fakes, free * (wb.weights / m)[:, None])
    g = _finite(g_tf + g_free, fakes, gen, free * wb.weights[:, None])
    diag.update(z_hat=wb.z_hat, ess=wb.ess, weight_sum=float(wb.weights.sum()),
                max_ratio=wb.max_ratio)
    return GradientVector(g, diag)
