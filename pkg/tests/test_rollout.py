import numpy as np
import pytest

from maligan.estimators import mle_grad, ratio
from maligan.models import SequenceBatch
from maligan.oracle import (OracleDiscriminator, all_sequences, enumerate_distribution, exact_per_step_mean, exact_q,
                            measure_estimator, optimal_discriminator, random_tabular, sequence_index)
from maligan.rollout import estimate_q, estimate_q_batch, per_step_grad, per_step_weights


def setup(seed, V=2, T=3, concentration=1.0):
    rng = np.random.default_rng(seed)
    gen = random_tabular(V, T, rng, concentration)
    pd = enumerate_distribution(random_tabular(V, T, rng, concentration))
    d = np.clip(optimal_discriminator(pd, enumerate_distribution(gen)), 1e-4, 1 - 1e-4)
    return gen, pd, d, OracleDiscriminator(V, T, d)


def test_half_discriminator_gives_unit_q():
    gen, _, _, _ = setup(0)
    batch = gen.sample(5, np.random.default_rng(0))
    est = estimate_q_batch(gen, OracleDiscriminator.constant(2, 3), batch, 4, np.random.default_rng(1))
    np.testing.assert_array_equal(est.q, 1.0)
    g = per_step_grad(gen, OracleDiscriminator.constant(2, 3), batch, 4, np.random.default_rng(1))
    np.testing.assert_allclose(g.values, mle_grad(gen, batch).values, atol=1e-14)


def test_full_length_q_is_sequence_ratio():
    gen, _, d, disc = setup(1)
    seq = SequenceBatch.fixed([[1, 0, 1]])
    for n in (1, 7):
        q, se = estimate_q(gen, disc, seq, 3, n, np.random.default_rng(0))
        assert q == ratio(d[sequence_index(seq.tokens, 2)[0]]) and se == 0.0
    with pytest.raises(ValueError):
        estimate_q(gen, disc, seq, 0, 4, np.random.default_rng(0))


def test_rollout_q_matches_conditional_expectation():
    gen, _, d, disc = setup(2)
    Q = exact_q(gen, d)
    rng = np.random.default_rng(3)
    for x in ([0, 1, 1], [1, 1, 0]):
        seq = SequenceBatch.fixed([x])
        row = sequence_index(seq.tokens, 2)[0]
        for t in (1, 2):
            q, se = estimate_q(gen, disc, seq, t, 10 ** 5, rng)
            assert abs(q - Q[row, t - 1]) < 4 * se


def test_single_step_weight_is_one():
    batch = SequenceBatch.fixed([[1]])
    assert per_step_weights(np.array([[3.7]]), batch)[0, 0] == pytest.approx(1.0)


def test_per_step_scale_invariance():
    gen, _, _, _ = setup(3, V=3)
    batch = gen.sample(6, np.random.default_rng(0))
    q = np.random.default_rng(1).uniform(0.1, 5, size=batch.tokens.shape)
    a = per_step_grad(gen, None, batch, q=q).values
    b = per_step_grad(gen, None, batch, q=q * 13.0).values
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_per_step_weights_are_mean_one_over_steps():
    batch = SequenceBatch.from_lists([[0, 1, 2], [1], [2, 2]], width=3)
    w = per_step_weights(np.random.default_rng(0).uniform(0.5, 2, size=(3, 3)), batch)
    assert w.sum() == pytest.approx(batch.mask().sum() / 3)
    assert np.all(w[~batch.mask()] == 0)


def test_single_rollout_estimator_matches_exact_expectation():
    gen, _, d, disc = setup(4, V=2, T=3, concentration=3.0)
    target = exact_per_step_mean(gen, d, 2)
    stats = measure_estimator(lambda rng: per_step_grad(gen, disc, gen.sample(2, rng), 1, rng).values,
                              40000, np.random.default_rng(5), target)
    assert np.max(np.abs(stats.z_scores())) < 4


def test_rollouts_do_not_consume_clamped_tokens():
    gen, _, _, disc = setup(5, V=3, T=4)
    batch = SequenceBatch.fixed(all_sequences(3, 4)[:10])
    est = estimate_q_batch(gen, disc, batch, 3, np.random.default_rng(0))
    assert np.all(est.counts == 3)
    assert np.all(est.q > 0)
