"""Monte Carlo rollout estimates of per-step value and the per-step weighted gradient.

``Q(a_t, s_t)`` is the expected ratio ``r_D`` of a full sequence obtained by
freezing the first ``t`` tokens and completing them with the current
generator.  Rollouts are plain Monte Carlo completions; no tree statistics
are kept.  Callers with a better value estimate (a search procedure, or the
exact oracle) can pass ``q`` directly to :func:`per_step_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import DEFAULT_DELTA, GradientVector, ratio, _finite
from .models import Generator, SequenceBatch

DEFAULT_ROLLOUTS = 16


@dataclass
class QEstimate:
    """Per-position rollout statistics for a batch; entries past a row's length are zero."""

    actions: np.ndarray
    counts: np.ndarray
    q: np.ndarray
    se: np.ndarray
    mask: np.ndarray


def estimate_q(gen: Generator, disc, seq: SequenceBatch, t: int, n_rollouts: int,
               rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of ``r_D`` over completions of ``seq[:t]`` (one-row batch)."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if len(seq) != 1:
        raise ValueError("estimate_q takes a single sequence")
    if not 1 <= t <= int(seq.lengths[0]):
        raise ValueError(f"position {t} outside sequence of length {int(seq.lengths[0])}")
    delta = getattr(disc, "delta", DEFAULT_DELTA)
    if t == int(seq.lengths[0]):
        # Nothing to complete: every rollout is the sequence itself.
        return float(ratio(disc.score(seq), delta)[0]), 0.0
    prefixes = seq.rows(np.zeros(n_rollouts, dtype=np.int64))
    done = gen.clamped_sample(prefixes, t, rng, max_len=max(gen.max_len, seq.width))
    r = ratio(disc.score(done), delta)
    se = float(r.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(r.mean()), se


def estimate_q_batch(gen: Generator, disc, batch: SequenceBatch, n_rollouts: int = DEFAULT_ROLLOUTS,
                     rng: np.random.Generator | None = None) -> QEstimate:
    """Rollout ``Q`` for every position of every row."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    delta = getattr(disc, "delta", DEFAULT_DELTA)
    B, W = batch.tokens.shape
    mask = batch.mask()
    q = np.zeros((B, W))
    se = np.zeros((B, W))
    counts = np.zeros((B, W), dtype=np.int64)
    full_r = ratio(disc.score(batch), delta)
    full_r = np.atleast_1d(full_r)
    for t in range(1, W + 1):
        rows = np.flatnonzero(batch.lengths > t)
        last = np.flatnonzero(batch.lengths == t)
        q[last, t - 1] = full_r[last]
        counts[last, t - 1] = n_rollouts
        if rows.size == 0:
            continue
        rep = np.repeat(rows, n_rollouts)
        done = gen.clamped_sample(batch.rows(rep), t, rng, max_len=max(gen.max_len, W))
        r = np.atleast_1d(ratio(disc.score(done), delta)).reshape(rows.size, n_rollouts)
        q[rows, t - 1] = r.mean(axis=1)
        if n_rollouts > 1:
            se[rows, t - 1] = r.std(axis=1, ddof=1) / np.sqrt(n_rollouts)
        counts[rows, t - 1] = n_rollouts
    return QEstimate(np.where(mask, batch.tokens, -1), counts, q, se, mask)


def per_step_weights(q: np.ndarray, batch: SequenceBatch) -> np.ndarray:
    """``(sum_i L_i) / (m sum Q) * Q_it`` over valid positions."""
    mask = batch.mask()
    qm = np.where(mask, q, 0.0)
    total = qm.sum()
    m = len(batch)
    n_steps = mask.sum()
    if not np.isfinite(total) or total <= 0:
        return mask / m
    return (qm * n_steps) / (m * total)


def per_step_grad(gen: Generator, disc, batch: SequenceBatch, n_rollouts: int = DEFAULT_ROLLOUTS,
                  rng: np.random.Generator | None = None, q: np.ndarray | None = None) -> GradientVector:
    """Per-step credit-assigned likelihood gradient; ``q`` overrides the rollout estimate."""
    if q is None:
        est = estimate_q_batch(gen, disc, batch, n_rollouts, rng)
        q = est.q
    w = per_step_weights(np.asarray(q, dtype=np.float64), batch)
    g = _finite(gen.grad_weighted(batch, w), batch, gen, w)
    mask = batch.mask()
    qv = np.asarray(q)[mask]
    n_steps = int(mask.sum())
    diag = {"z_hat": float(qv.mean()) if qv.size else 1.0,
            "ess": float(qv.sum() ** 2 / (qv * qv).sum()) if qv.size else 0.0,
            "weight_sum": float(w.sum()), "steps": n_steps, "m": len(batch)}
    return GradientVector(g, diag)
